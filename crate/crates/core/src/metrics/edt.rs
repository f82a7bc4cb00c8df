//! Exact squared Euclidean distance transform (lower envelope of parabolas,
//! one pass per axis) with per-axis voxel spacing.

use crate::volgrid::GridShape;

fn transform_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest `true` voxel of
/// `features`, infinite when there are none.
pub fn squared_distance_transform(shape: GridShape, features: &[bool], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = shape.dims();
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let longest = nx.max(ny).max(nz);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);

    // axis, line length, stride between neighbors, start offsets of every line
    let passes: [(usize, usize, Vec<usize>); 3] = [
        (nx, 1, (0..ny * nz).map(|r| r * nx).collect()),
        (ny, nx, (0..nz).flat_map(|zz| (0..nx).map(move |x| zz * nx * ny + x)).collect()),
        (nz, nx * ny, (0..nx * ny).collect()),
    ];
    for (axis, (len, stride, starts)) in passes.iter().enumerate() {
        let w = spacing[axis] * spacing[axis];
        for &s in starts {
            for i in 0..*len {
                line[i] = d[s + i * stride];
            }
            transform_line(&line[..*len], w, &mut out[..*len], &mut v, &mut z);
            for i in 0..*len {
                d[s + i * stride] = out[i];
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(shape: GridShape, f: &[bool], sp: [f64; 3]) -> Vec<f64> {
        (0..f.len())
            .map(|i| {
                let p = shape.coords(i);
                (0..f.len())
                    .filter(|&j| f[j])
                    .map(|j| {
                        let q = shape.coords(j);
                        (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * sp[a]).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn no_features() {
        let s = GridShape::cube(3).unwrap();
        assert!(squared_distance_transform(s, &[false; 27], [1.0; 3]).iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn single_point() {
        let s = GridShape::new(5, 4, 3).unwrap();
        let mut f = vec![false; s.voxel_count()];
        f[s.index(4, 0, 2)] = true;
        let d = squared_distance_transform(s, &f, [1.0, 2.0, 0.5]);
        assert_eq!(d[s.index(0, 0, 0)], 16.0 + 1.0);
        assert_eq!(d[s.index(4, 3, 2)], 36.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            dims in (1usize..8, 1usize..8, 1usize..8),
            density in 0.0f64..0.4,
            sp in (0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0),
            seed in any::<u64>(),
        ) {
            let s = GridShape::new(dims.0, dims.1, dims.2).unwrap();
            let mut state = seed;
            let f: Vec<bool> = (0..s.voxel_count()).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) < density
            }).collect();
            let sp = [sp.0, sp.1, sp.2];
            let fast = squared_distance_transform(s, &f, sp);
            let slow = brute(s, &f, sp);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!(a == b || (a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
            }
        }
    }
}
