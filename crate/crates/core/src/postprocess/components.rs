use serde::{Deserialize, Serialize};

use crate::volgrid::{CropBox, GridShape};

/// Voxel neighborhood used to decide whether two foreground voxels touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Shared faces.
    Six,
    /// Shared faces or edges.
    Eighteen,
    /// Shared faces, edges or corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Self::Six, Self::Eighteen, Self::TwentySix];

    pub fn neighbors(self) -> u8 {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    /// Largest |dx|+|dy|+|dz| of a neighbor offset.
    fn max_manhattan(self) -> i32 {
        match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        }
    }

    /// Offsets `(dx, dy, dz)` of all neighbors.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1i32 {
            for dy in -1..=1i32 {
                for dx in -1..=1i32 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m > 0 && m <= self.max_manhattan() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.neighbors()
    }
}

/// One maximal connected cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub id: u32,
    pub size: usize,
    pub bbox: CropBox,
}

/// Component labeling of a binary grid. `labels` is 0 for background and
/// `1..=K` otherwise, with ids assigned in order of each component's first
/// voxel in memory order.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub shape: GridShape,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let up = parent[parent[a as usize] as usize];
        parent[a as usize] = up;
        a = up;
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller provisional label as root so roots stay in first-seen order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling.
pub fn connected_components(shape: GridShape, mask: &[bool], connectivity: Connectivity) -> Components {
    assert_eq!(mask.len(), shape.voxel_count(), "mask length must match shape");
    let [nx, ny, nz] = shape.dims();
    // neighbors already visited in memory order
    let back: Vec<[i32; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[dx, dy, dz]| (dz, dy, dx) < (0, 0, 0))
        .collect();

    let mut labels = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask[i] {
                    let mut current = 0u32;
                    for &[dx, dy, dz] in &back {
                        let (px, py, pz) = (x as i64 + dx as i64, y as i64 + dy as i64, z as i64 + dz as i64);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 {
                            continue;
                        }
                        let l = labels[shape.index(px as usize, py as usize, pz as usize)];
                        if l == 0 {
                            continue;
                        }
                        if current == 0 {
                            current = l;
                        } else if l != current {
                            union(&mut parent, current, l);
                        }
                    }
                    if current == 0 {
                        current = parent.len() as u32;
                        parent.push(current);
                    }
                    labels[i] = current;
                }
                i += 1;
            }
        }
    }

    // Roots are the smallest provisional label of each tree, and provisional
    // labels are issued in memory order, so numbering roots by value gives
    // ids in first-voxel order.
    let mut final_id = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in 1..parent.len() as u32 {
        let r = find(&mut parent, l);
        if r == l {
            next += 1;
            final_id[l as usize] = next;
        } else {
            final_id[l as usize] = final_id[r as usize];
        }
    }

    let mut lo = vec![[usize::MAX; 3]; next as usize];
    let mut hi = vec![[0usize; 3]; next as usize];
    let mut sizes = vec![0usize; next as usize];
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == 0 {
            continue;
        }
        *l = final_id[*l as usize];
        let k = *l as usize - 1;
        sizes[k] += 1;
        let p = shape.coords(i);
        for a in 0..3 {
            lo[k][a] = lo[k][a].min(p[a]);
            hi[k][a] = hi[k][a].max(p[a] + 1);
        }
    }
    let components = (0..next as usize)
        .map(|k| Component {
            id: k as u32 + 1,
            size: sizes[k],
            bbox: CropBox::new(lo[k], hi[k], shape).expect("box of voxels inside the grid"),
        })
        .collect();
    Components {
        shape,
        labels,
        components,
    }
}
