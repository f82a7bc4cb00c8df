//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorseg::ensemble::{infer_ensemble, infer_tta, EnsembleConfig, TtaConfig};
use tumorseg::metrics::{score_case, DistanceUnit, MetricsConfig, Region, RegionMask, EMPTY_HD95_PENALTY};
use tumorseg::pipeline::{Pipeline, PipelineConfig};
use tumorseg::postprocess::{
    connected_components, filter_components, postprocess, Channel, Connectivity, PostprocessParams,
};
use tumorseg::predictor::{ConstantBackend, PatchSpec, PredictorBackend, SphereStubBackend};
use tumorseg::preprocess;
use tumorseg::synth::{generate, write_case, PhantomSpec};
use tumorseg::tiler::{plan_windows, sliding_window_inference, BlendMode, TilerConfig, WindowPlan};
use tumorseg::volgrid::{Affine, Grid, GridShape, LabelMap, MultimodalVolume, ProbabilityMap};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn shape(nx: usize, ny: usize, nz: usize) -> GridShape {
    GridShape::new(nx, ny, nz).unwrap()
}

fn sphere_stub(patch: GridShape) -> SphereStubBackend {
    SphereStubBackend::new("sphere", PatchSpec::new(patch), SphereStubBackend::default_rules()).unwrap()
}

fn max_abs_diff(a: &ProbabilityMap, b: &ProbabilityMap) -> f64 {
    a.grid()
        .data()
        .iter()
        .zip(b.grid().data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Normalized, cropped synthetic volume.
fn phantom_volume(s: GridShape, blobs: usize, seed: u64) -> MultimodalVolume {
    let p = generate(&PhantomSpec::random(s, blobs, seed)).unwrap();
    preprocess::preprocess(&p.volume).unwrap().volume
}

// 1
fn tiler_plan() -> Outcome {
    let vol = shape(240, 240, 155);
    let plan = plan_windows(vol, GridShape::cube(128).unwrap(), 0.5).map_err(|e| e.to_string())?;
    check(plan.window_count() == 18, || format!("{} windows", plan.window_count()))?;
    check(plan.starts[0] == [0, 64, 112] && plan.starts[1] == [0, 64, 112] && plan.starts[2] == [0, 27], || {
        format!("starts {:?}", plan.starts)
    })?;
    let [nx, ny, _] = vol.dims();
    let mut covered = vec![0u8; vol.voxel_count()];
    for w in plan.windows() {
        let o = w.origin;
        for z in o[2]..o[2] + 128 {
            for y in o[1]..o[1] + 128 {
                let row = (z * ny + y) * nx;
                for c in &mut covered[row + o[0]..row + o[0] + 128] {
                    *c = c.saturating_add(1);
                }
            }
        }
    }
    let uncovered = covered.iter().filter(|&&c| c == 0).count();
    check(uncovered == 0, || format!("{uncovered} voxels uncovered"))?;
    Ok(format!("18 windows, starts x/y={:?} z={:?}, every voxel covered", plan.starts[0], plan.starts[2]))
}

// 2
fn blending_conservation() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let patch = shape(rng.gen_range(4..=12), rng.gen_range(4..=12), rng.gen_range(4..=12));
        let vol = shape(
            rng.gen_range(patch.dims()[0]..=40),
            rng.gen_range(patch.dims()[1]..=40),
            rng.gen_range(patch.dims()[2]..=40),
        );
        let overlap = [0.0, 0.25, 0.5, 0.75][case % 4];
        let c: f32 = rng.gen_range(0.0..=1.0);
        let backend = ConstantBackend::new("const", PatchSpec::new(patch), c).map_err(|e| e.to_string())?;
        let input = Grid::filled(vol, 4, 0.0f32);
        for mode in [BlendMode::Uniform, BlendMode::Gaussian] {
            let plan = plan_windows(vol, patch, overlap).map_err(|e| e.to_string())?.with_blend_mode(mode);
            let out = sliding_window_inference(&backend, &input, &plan, 2).map_err(|e| e.to_string())?;
            let err = out.grid().data().iter().map(|&v| (v as f64 - c as f64).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            check(err <= 1e-6, || format!("{vol} patch {patch} {mode:?}: max error {err:e}"))?;
        }
    }
    let elapsed = t0.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("50 shapes x 2 modes, max error {worst:.1e}, {:.1}s", elapsed.as_secs_f64()))
}

// 3
fn tta_invariance() -> Outcome {
    let flips = TtaConfig { enabled: true }.flip_sets();
    let mut distinct: Vec<[bool; 3]> = flips.iter().map(|f| f.flags()).collect();
    distinct.sort();
    distinct.dedup();
    check(flips.len() == 8 && distinct.len() == 8, || format!("{} flip sets", distinct.len()))?;
    let vol = phantom_volume(shape(44, 40, 34), 3, 3);
    let patch = shape(16, 16, 16);
    let stub = sphere_stub(patch);
    let tiler = TilerConfig {
        patch_shape: patch,
        ..TilerConfig::default()
    };
    let tta = infer_tta(&stub, &vol, &tiler, &TtaConfig { enabled: true }, 4).map_err(|e| e.to_string())?;
    let single = infer_tta(&stub, &vol, &tiler, &TtaConfig { enabled: false }, 4).map_err(|e| e.to_string())?;
    let d = max_abs_diff(&tta, &single);
    check(d <= 1e-5, || format!("max difference {d:e}"))?;
    Ok(format!("8 distinct flips, max |TTA - single| = {d:.1e} over {}", vol.shape()))
}

/// Breadth-first labeling in scan order.
fn flood_fill(s: GridShape, mask: &[bool], connectivity: Connectivity) -> Vec<u32> {
    let reach = match connectivity {
        Connectivity::Six => 1,
        Connectivity::Eighteen => 2,
        Connectivity::TwentySix => 3,
    };
    let [nx, ny, nz] = s.dims().map(|d| d as i64);
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let p = s.coords(i).map(|v| v as i64);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let nonzero = (dx != 0) as i32 + (dy != 0) as i32 + (dz != 0) as i32;
                        if nonzero == 0 || nonzero > reach {
                            continue;
                        }
                        let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                        if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx || q[1] >= ny || q[2] >= nz {
                            continue;
                        }
                        let j = ((q[2] * ny + q[1]) * nx + q[0]) as usize;
                        if mask[j] && labels[j] == 0 {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    labels
}

// 4
fn components_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0usize;
    for case in 0..1000 {
        let s = shape(rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let density: f64 = rng.gen_range(0.05..0.7);
        let mask: Vec<bool> = (0..s.voxel_count()).map(|_| rng.gen_bool(density)).collect();
        let conn = Connectivity::ALL[case % 3];
        let got = connected_components(s, &mask, conn);
        let want = flood_fill(s, &mask, conn);
        check(got.labels == want, || format!("grid {case} ({s}, {conn:?}) differs from flood fill"))?;
        let k = want.iter().copied().max().unwrap_or(0) as usize;
        check(got.components.len() == k, || format!("grid {case}: {} components, want {k}", got.components.len()))?;
        total += k;
    }
    Ok(format!("1000 grids, {total} components, identical partitions"))
}

fn line_mask(s: GridShape, n: usize) -> Vec<bool> {
    (0..s.voxel_count()).map(|i| i < n).collect()
}

// 5
fn default_postprocess() -> Outcome {
    let p = PostprocessParams::default();
    for c in Channel::ALL {
        check(p.threshold.get(c) == 0.5, || format!("{c:?} threshold {}", p.threshold.get(c)))?;
    }
    let sizes = [(Channel::Et, 100), (Channel::Tc, 150), (Channel::Wt, 500)];
    for (c, n) in sizes {
        check(p.min_component_size.get(c) == n, || format!("{c:?} min size {}", p.min_component_size.get(c)))?;
        let s = shape(32, 32, 1);
        for (size, keep) in [(n - 1, false), (n, true)] {
            let mask = line_mask(s, size);
            let comps = connected_components(s, &mask, p.connectivity);
            let probs = vec![0.9f32; s.voxel_count()];
            let (_, records) = filter_components(&comps, &probs, c, &p);
            check(records.len() == 1 && records[0].kept == keep, || format!("{c:?} size {size}: {records:?}"))?;
        }
    }
    // the threshold itself is inclusive
    let map = ProbabilityMap::constant(shape(10, 10, 10), 0.5).unwrap();
    let (labels, _) = postprocess(&map, &p, Affine::IDENTITY).map_err(|e| e.to_string())?;
    check(labels.data().iter().all(|&l| l == 3), || "0.5 everywhere should be all ET".into())?;
    Ok("threshold 0.5 x3; sizes ET 100 / TC 150 / WT 500; 99/100, 149/150, 499/500 boundaries".into())
}

fn naive_boundary(s: GridShape, m: &[bool]) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = s.dims();
    (0..m.len())
        .filter(|&i| m[i])
        .map(|i| s.coords(i))
        .filter(|&[x, y, z]| {
            let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
            edge || !m[s.index(x - 1, y, z)]
                || !m[s.index(x + 1, y, z)]
                || !m[s.index(x, y - 1, z)]
                || !m[s.index(x, y + 1, z)]
                || !m[s.index(x, y, z - 1)]
                || !m[s.index(x, y, z + 1)]
        })
        .collect()
}

fn naive_hd95(s: GridShape, a: &[bool], b: &[bool], spacing: [f64; 3]) -> f64 {
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    if ea && eb {
        return 0.0;
    }
    if ea || eb {
        return 373.13;
    }
    let (ba, bb) = (naive_boundary(s, a), naive_boundary(s, b));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut d: Vec<f64> = Vec::new();
    for (from, to) in [(&ba, &bb), (&bb, &ba)] {
        for p in from {
            d.push(to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

fn naive_dice(a: &[bool], b: &[bool]) -> f64 {
    let (na, nb) = (a.iter().filter(|&&v| v).count(), b.iter().filter(|&&v| v).count());
    if na + nb == 0 {
        return 1.0;
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    2.0 * inter as f64 / (na + nb) as f64
}

fn random_labels(rng: &mut ChaCha8Rng, s: GridShape, affine: Affine) -> LabelMap {
    let n = s.voxel_count();
    let data = match rng.gen_range(0..5) {
        0 => vec![0u8; n],
        1 => {
            // one solid box of a single label
            let l = rng.gen_range(1..=3u8);
            let [nx, ny, nz] = s.dims();
            let lo = [rng.gen_range(0..nx), rng.gen_range(0..ny), rng.gen_range(0..nz)];
            (0..n)
                .map(|i| {
                    let p = s.coords(i);
                    if (0..3).all(|k| p[k] >= lo[k] && p[k] < lo[k] + 4) {
                        l
                    } else {
                        0
                    }
                })
                .collect()
        }
        _ => {
            let fg: f64 = rng.gen_range(0.05..0.6);
            (0..n)
                .map(|_| if rng.gen_bool(fg) { rng.gen_range(1..=3) } else { 0 })
                .collect()
        }
    };
    LabelMap::new(s, data, affine).unwrap()
}

// 6
fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let s = shape(rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12));
        let (spacing, cfg) = if case % 2 == 0 {
            ([1.0; 3], MetricsConfig::default())
        } else {
            let sp = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..3.0)];
            (
                sp,
                MetricsConfig {
                    units: DistanceUnit::Mm,
                    ..MetricsConfig::default()
                },
            )
        };
        let affine = Affine::from_spacing(spacing);
        let pred = random_labels(&mut rng, s, affine);
        let reference = random_labels(&mut rng, s, affine);
        let score = score_case(&pred, &reference, &cfg).map_err(|e| e.to_string())?;
        for region in [Region::Et, Region::Tc, Region::Wt] {
            let a = RegionMask::from_labels(&pred, region).mask;
            let b = RegionMask::from_labels(&reference, region).mask;
            let (dice, hd) = (naive_dice(&a, &b), naive_hd95(s, &a, &b, spacing));
            let (ed, eh) = ((score.dice.get(region) - dice).abs(), (score.hd95.get(region) - hd).abs());
            worst = worst.max(ed).max(eh);
            check(ed <= 1e-9 && eh <= 1e-9, || {
                format!(
                    "pair {case} {region:?}: dice {} vs {dice}, hd95 {} vs {hd}",
                    score.dice.get(region),
                    score.hd95.get(region)
                )
            })?;
        }
    }
    let s = shape(6, 6, 6);
    let empty = RegionMask::from_labels(&LabelMap::zeros(s, Affine::IDENTITY), Region::Wt);
    let mut one = vec![0u8; s.voxel_count()];
    one[s.index(2, 2, 2)] = 2;
    let full = RegionMask::from_labels(&LabelMap::new(s, one, Affine::IDENTITY).unwrap(), Region::Wt);
    let both = (tumorseg::metrics::dice(&empty, &empty), tumorseg::metrics::hd95(&empty, &empty, [1.0; 3]));
    let single = (tumorseg::metrics::dice(&full, &empty), tumorseg::metrics::hd95(&empty, &full, [1.0; 3]));
    check(
        matches!(both, (Ok(d), Ok(h)) if d == 1.0 && h == 0.0),
        || format!("both empty gives {both:?}"),
    )?;
    check(
        matches!(single, (Ok(d), Ok(h)) if d == 0.0 && h == 373.13) && EMPTY_HD95_PENALTY == 373.13,
        || format!("one empty gives {single:?}"),
    )?;
    Ok(format!("500 pairs, max deviation {worst:.1e}; empty conventions 1.0/0.0 and 0.0/373.13"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 7
fn synthetic_postprocessing_gain(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let cases = root.join("suite");
    let mut phantoms = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..20 {
        let s = shape(rng.gen_range(56..72), rng.gen_range(56..72), rng.gen_range(44..56));
        let spec = PhantomSpec::random(s, rng.gen_range(3..=8), 700 + k);
        let p = generate(&spec).map_err(|e| e.to_string())?;
        write_case(&p, &cases, &format!("case{k:02}"), None).map_err(|e| e.to_string())?;
        phantoms.push(p);
    }
    let text = format!(
        "[input]\ndir = \"{}\"\n[tiler]\npatch_shape = [32, 32, 32]\n[[ensemble.backends]]\nkind = \"stub-sphere\"\n[output]\ndir = \"{}\"\n",
        cases.display(),
        root.join("suite-out").display()
    );
    let cfg = PipelineConfig::from_toml(&text, root, &[]).map_err(|e| e.to_string())?;
    let defaults = cfg.postprocess;
    check(defaults == PostprocessParams::default(), || "config did not pick up default parameters".into())?;
    let pipeline = Pipeline::new(cfg).map_err(|e| e.to_string())?;
    let inputs = pipeline.cases().map_err(|e| e.to_string())?;

    let (mut with, mut without) = (Vec::new(), Vec::new());
    let (mut blobs, mut leftover) = (0usize, 0usize);
    for (case, phantom) in inputs.iter().zip(&phantoms) {
        let inf = pipeline.infer_case(case, &mut Vec::new()).map_err(|f| f.message)?;
        let prep = &inf.prepared;
        let affine = prep.original_affine.shifted(prep.crop_box.lo.map(|v| v as i64));
        let labels_for = |params: &PostprocessParams| -> Result<LabelMap, String> {
            let (labels, records) = postprocess(&inf.probabilities, params, affine).map_err(|e| e.to_string())?;
            for r in &records {
                if r.size < params.min_component_size.get(r.channel) && r.kept {
                    return Err(format!("{}: {:?} component of {} voxels kept", case.id, r.channel, r.size));
                }
            }
            preprocess::restore(&labels, &prep.crop_box).map_err(|e| e.to_string())
        };
        let filtered = labels_for(&defaults)?;
        let raw = labels_for(&PostprocessParams::unfiltered())?;
        let detected = phantom.blob_voxels.iter().filter(|&&i| raw.data()[i] != 0).count();
        check(detected == phantom.blob_voxels.len(), || {
            format!("{}: only {detected}/{} noise voxels predicted", case.id, phantom.blob_voxels.len())
        })?;
        blobs += phantom.blob_sizes.len();
        leftover += phantom.blob_voxels.iter().filter(|&&i| filtered.data()[i] != 0).count();
        let metrics = MetricsConfig::default();
        with.push(score_case(&filtered, &phantom.reference, &metrics).map_err(|e| e.to_string())?.mean_dice);
        without.push(score_case(&raw, &phantom.reference, &metrics).map_err(|e| e.to_string())?.mean_dice);
    }
    let (dw, dn) = (mean(&with), mean(&without));
    let gain = 100.0 * (dw - dn);
    let elapsed = t0.elapsed();
    check(leftover == 0, || format!("{leftover} noise voxels survived postprocessing"))?;
    check(gain >= 2.0, || format!("gain {gain:.2} Dice points ({dn:.4} -> {dw:.4})"))?;
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "mean Dice {dn:.4} -> {dw:.4} (+{gain:.2} points), {blobs} noise blobs all removed, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 8
fn ensemble_sanity() -> Outcome {
    let vol = phantom_volume(shape(30, 28, 22), 2, 8);
    let patch = shape(12, 12, 12);
    let tiler = TilerConfig {
        patch_shape: patch,
        ..TilerConfig::default()
    };
    let tta = TtaConfig { enabled: true };
    let stub: Arc<dyn PredictorBackend> = Arc::new(sphere_stub(patch));
    let alone = infer_tta(stub.as_ref(), &vol, &tiler, &tta, 2).map_err(|e| e.to_string())?;
    let single = infer_ensemble(&EnsembleConfig::single(stub.clone()), &vol, &tiler, &tta, 2).map_err(|e| e.to_string())?;
    let d1 = max_abs_diff(&alone, &single);
    check(d1 <= 1e-6, || format!("single-backend ensemble differs by {d1:e}"))?;
    let plan = WindowPlan::from_config(vol.shape(), &tiler).map_err(|e| e.to_string())?;
    let direct = sliding_window_inference(stub.as_ref(), vol.grid(), &plan, 2).map_err(|e| e.to_string())?;
    let no_tta = TtaConfig { enabled: false };
    let plain = infer_ensemble(&EnsembleConfig::single(stub), &vol, &tiler, &no_tta, 2).map_err(|e| e.to_string())?;
    let d2 = max_abs_diff(&direct, &plain);
    check(d2 <= 1e-6, || format!("single-backend ensemble without TTA differs by {d2:e}"))?;

    let spec = PatchSpec::new(patch);
    let consts: Vec<Arc<dyn PredictorBackend>> = [0.2f32, 0.8]
        .iter()
        .map(|&c| Arc::new(ConstantBackend::new(format!("c{c}"), spec.clone(), c).unwrap()) as Arc<dyn PredictorBackend>)
        .collect();
    let cfg = EnsembleConfig::new(consts, None).map_err(|e| e.to_string())?;
    let avg = infer_ensemble(&cfg, &vol, &tiler, &tta, 2).map_err(|e| e.to_string())?;
    let d3 = avg.grid().data().iter().map(|&v| (v as f64 - 0.5).abs()).fold(0.0, f64::max);
    check(d3 <= 1e-6, || format!("{{0.2, 0.8}} ensemble is off 0.5 by {d3:e}"))?;
    Ok(format!("one backend within {:.1e}; {{0.2, 0.8}} -> 0.5 within {d3:.1e}", d1.max(d2)))
}

// 9
fn run_determinism(root: &Path) -> Outcome {
    let cases = root.join("det");
    for (k, seed) in [91u64, 92, 93].iter().enumerate() {
        let p = generate(&PhantomSpec::random(shape(48, 44, 36), 4, *seed)).map_err(|e| e.to_string())?;
        write_case(&p, &cases, &format!("d{k}"), None).map_err(|e| e.to_string())?;
    }
    let mut outputs: Vec<(usize, Vec<Vec<u8>>, String)> = Vec::new();
    for (run, workers) in [1usize, 1, 4, 4].iter().enumerate() {
        // reruns reuse the same config, output directory included
        let out = root.join(format!("det-out{workers}"));
        let text = format!(
            "workers = {workers}\n[input]\ndir = \"{}\"\n[tiler]\npatch_shape = [24, 24, 24]\n[[ensemble.backends]]\nkind = \"stub-sphere\"\n[postprocess.min_component_size]\net = 10\ntc = 10\nwt = 10\n[output]\ndir = \"{}\"\n",
            cases.display(),
            out.display()
        );
        let pipeline = Pipeline::new(PipelineConfig::from_toml(&text, root, &[]).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let report = pipeline.run_batch(&pipeline.cases().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        check(report.exit_code() == 0, || format!("run {run} had failures: {:?}", report.failed))?;
        let files = (0..3)
            .map(|k| std::fs::read(out.join(format!("d{k}.nii.gz"))).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        outputs.push((*workers, files, pipeline.config_hash().to_string()));
    }
    for (w, files, _) in &outputs[1..] {
        check(*files == outputs[0].1, || format!("label files differ with {w} workers"))?;
    }
    check(outputs[0].2 == outputs[1].2 && outputs[2].2 == outputs[3].2, || "config hash changed between reruns".into())?;
    Ok("3 cases x 4 runs (workers 1,1,4,4): byte-identical label files, stable config hash".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("tiler plan (240,240,155) / 128^3 / 0.5", Box::new(tiler_plan)),
        ("blending conservation", Box::new(blending_conservation)),
        ("TTA invariance", Box::new(tta_invariance)),
        ("connected components vs flood fill", Box::new(components_oracle)),
        ("default postprocessing parameters", Box::new(default_postprocess)),
        ("Dice/HD95 vs naive oracle", Box::new(metrics_oracle)),
        ("postprocessing gain on synthetic suite", Box::new(move || synthetic_postprocessing_gain(root))),
        ("ensemble sanity", Box::new(ensemble_sanity)),
        ("run determinism across workers", Box::new(move || run_determinism(root))),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
