//! Binary 3D morphology with the 6-connected (face-adjacent) structuring element.

use crate::volume::Mask;

const FACES: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

#[inline]
fn neighbour(shape: [usize; 3], p: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for k in 0..3 {
        let v = p[k] as isize + d[k];
        if v < 0 || v >= shape[k] as isize {
            return None;
        }
        q[k] = v as usize;
    }
    Some(q)
}

fn step(m: &Mask, erode: bool) -> Mask {
    let [nz, ny, nx] = m.shape;
    let mut out = m.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let on = m.get(z, y, x) != 0;
                if erode && on {
                    // outside the grid counts as background
                    let keep = FACES.iter().all(|&d| {
                        neighbour(m.shape, [z, y, x], d).is_some_and(|q| m.get(q[0], q[1], q[2]) != 0)
                    });
                    out.set(z, y, x, keep as u8);
                } else if !erode && !on {
                    let grow = FACES.iter().any(|&d| {
                        neighbour(m.shape, [z, y, x], d).is_some_and(|q| m.get(q[0], q[1], q[2]) != 0)
                    });
                    out.set(z, y, x, grow as u8);
                } else {
                    out.set(z, y, x, on as u8);
                }
            }
        }
    }
    out
}

pub fn erode(m: &Mask, iterations: u32) -> Mask {
    let mut out = binarized(m);
    for _ in 0..iterations {
        out = step(&out, true);
    }
    out
}

pub fn dilate(m: &Mask, iterations: u32) -> Mask {
    let mut out = binarized(m);
    for _ in 0..iterations {
        out = step(&out, false);
    }
    out
}

fn binarized(m: &Mask) -> Mask {
    Mask { data: m.data.iter().map(|&v| (v != 0) as u8).collect(), ..m.clone() }
}

/// 6-connected component labelling. Returns per-voxel labels (0 = background,
/// components numbered from 1 in raster order of their first voxel) and the
/// size of each component (index 0 unused).
pub fn connected_components(m: &Mask) -> (Vec<u32>, Vec<usize>) {
    let shape = m.shape;
    let [_, ny, nx] = shape;
    let mut labels = vec![0u32; m.data.len()];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..m.data.len() {
        if m.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let p = [i / (ny * nx), (i / nx) % ny, i % nx];
            for d in FACES {
                if let Some(q) = neighbour(shape, p, d) {
                    let j = (q[0] * ny + q[1]) * nx + q[2];
                    if m.data[j] != 0 && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Removes the `count` smallest components (ties: later label first removed
/// last, i.e. lower label kept).
pub fn drop_smallest_components(m: &Mask, count: usize) -> Mask {
    let (labels, sizes) = connected_components(m);
    let mut order: Vec<usize> = (1..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
    let mut dropped = vec![false; sizes.len()];
    for &l in order.iter().take(count) {
        dropped[l] = true;
    }
    let data = labels.iter().map(|&l| (l != 0 && !dropped[l as usize]) as u8).collect();
    Mask { data, ..m.clone() }
}

/// Shifts the foreground by `offset` voxels along `axis`, filling with zeros.
pub fn translate(m: &Mask, axis: usize, offset: isize) -> Mask {
    let [nz, ny, nx] = m.shape;
    let mut out = Mask { data: vec![0; m.data.len()], ..m.clone() };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(z, y, x) == 0 {
                    continue;
                }
                let mut d = [0isize; 3];
                d[axis] = offset;
                if let Some(q) = neighbour(m.shape, [z, y, x], d) {
                    out.set(q[0], q[1], q[2], 1);
                }
            }
        }
    }
    out
}
