use super::{BinaryMask, BoundingBox, HeatMap};

/// Summary of one 8-connected component of set bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pixel_count: usize,
    /// Sum of heat-map values over the component, accumulated in row-major
    /// order (zero when no heat map is supplied).
    pub heat_sum: f64,
    /// Row-major index of the component's first pixel in scan order.
    pub origin: usize,
    pub bbox: BoundingBox,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller index as root so labels follow scan order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Two-pass union-find labelling with 8-connectivity. Components are
/// returned in order of their origin.
pub fn connected_components(mask: &BinaryMask, weights: Option<&HeatMap>) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if !mask.bits[idx] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let neighbours = [
                (x > 0).then(|| idx - 1),
                (x > 0 && y > 0).then(|| idx - w - 1),
                (y > 0).then(|| idx - w),
                (x + 1 < w && y > 0).then(|| idx - w + 1),
            ];
            for n in neighbours.into_iter().flatten() {
                if mask.bits[n] {
                    union(&mut parent, idx, n);
                }
            }
        }
    }

    let mut slot_of_root = vec![usize::MAX; w * h];
    let mut components: Vec<Component> = Vec::new();
    for idx in 0..w * h {
        if !mask.bits[idx] {
            continue;
        }
        let root = find(&mut parent, idx);
        let (x, y) = (idx % w, idx / w);
        let heat = weights.map_or(0.0, |hm| hm.values[idx]);
        if slot_of_root[root] == usize::MAX {
            slot_of_root[root] = components.len();
            components.push(Component {
                pixel_count: 0,
                heat_sum: 0.0,
                origin: idx,
                bbox: BoundingBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
            });
        }
        let c = &mut components[slot_of_root[root]];
        c.pixel_count += 1;
        c.heat_sum += heat;
        c.bbox.x_min = c.bbox.x_min.min(x);
        c.bbox.x_max = c.bbox.x_max.max(x);
        c.bbox.y_min = c.bbox.y_min.min(y);
        c.bbox.y_max = c.bbox.y_max.max(y);
    }
    components
}

/// Chooses the component with the most pixels; ties go to the larger heat
/// sum, then to the earliest origin in scan order.
pub fn select_largest(components: &[Component]) -> Option<&Component> {
    components.iter().reduce(|best, c| {
        let better = c.pixel_count > best.pixel_count
            || (c.pixel_count == best.pixel_count && c.heat_sum > best.heat_sum);
        if better {
            c
        } else {
            best
        }
    })
}
