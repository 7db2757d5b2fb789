//! Calving-front extraction from zone masks.
//!
//! Components and boundaries use 4-connectivity; polylines are traced with
//! 8-connectivity. The length filter is applied to each 8-connected boundary
//! piece as a whole, so a front keeps its short side branches.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::zones::{polyline_length_px, FrontSet, Point, ZoneMask, GLACIER, OIM, ROCK};

pub const MIN_FRONT_LENGTH_M: f64 = 750.0;

const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn neighbour(i: usize, w: usize, h: usize, (dx, dy): (isize, isize)) -> Option<usize> {
    let x = (i % w) as isize + dx;
    let y = (i / w) as isize + dy;
    (x >= 0 && y >= 0 && x < w as isize && y < h as isize).then(|| y as usize * w + x as usize)
}

/// 4-connected components of `fg`, in raster order of their first pixel.
pub fn components4(fg: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for d in N4 {
                if let Some(j) = neighbour(i, w, h, d) {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Background regions that are not 4-connected to the image border become foreground.
pub fn fill_holes(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for i in 0..fg.len() {
        let (x, y) = (i % w, i / w);
        let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
        if border && !fg[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for d in N4 {
            if let Some(j) = neighbour(i, w, h, d) {
                if !fg[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Applies the rock overlay, keeps the largest OIM component (smallest first
/// pixel on ties), relabels the others glacier and fills its holes as OIM.
pub fn postprocess(mask: &ZoneMask, rock_mask: Option<&ZoneMask>) -> Result<ZoneMask> {
    let mut out = mask.clone();
    if let Some(r) = rock_mask {
        if !r.same_dims(mask) {
            return Err(Error::Input(format!(
                "rock mask is {}x{}, prediction {}x{}",
                r.width, r.height, mask.width, mask.height
            )));
        }
        for (c, &rc) in out.classes.iter_mut().zip(&r.classes) {
            if rc == ROCK {
                *c = ROCK;
            }
        }
    }
    let (w, h) = (out.width, out.height);
    let oim: Vec<bool> = out.classes.iter().map(|&c| c == OIM).collect();
    let comps = components4(&oim, w, h);
    let Some(best) = comps
        .iter()
        .enumerate()
        .fold(None::<usize>, |b, (i, c)| match b {
            Some(j) if comps[j].len() >= c.len() => Some(j),
            _ => Some(i),
        })
    else {
        return Ok(out);
    };
    for (i, comp) in comps.iter().enumerate() {
        if i != best {
            for &p in comp {
                out.classes[p] = GLACIER;
            }
        }
    }
    let mut keep = vec![false; w * h];
    for &p in &comps[best] {
        keep[p] = true;
    }
    for (p, f) in fill_holes(&keep, w, h).into_iter().enumerate() {
        if f {
            out.classes[p] = OIM;
        }
    }
    Ok(out)
}

/// OIM pixels with a 4-neighbouring glacier pixel.
pub fn boundary_pixels(mask: &ZoneMask) -> Vec<bool> {
    let (w, h) = (mask.width, mask.height);
    (0..w * h)
        .map(|i| {
            mask.classes[i] == OIM
                && N4
                    .iter()
                    .any(|&d| neighbour(i, w, h, d).is_some_and(|j| mask.classes[j] == GLACIER))
        })
        .collect()
}

/// Traces each 8-connected group of boundary pixels into polylines.
pub fn trace(boundary: &[bool], w: usize, h: usize) -> Vec<Vec<Vec<Point>>> {
    let mut group_of = vec![usize::MAX; boundary.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for start in 0..boundary.len() {
        if !boundary[start] || group_of[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut comp = vec![start];
        group_of[start] = id;
        let mut k = 0;
        while k < comp.len() {
            let i = comp[k];
            k += 1;
            for d in N8 {
                if let Some(j) = neighbour(i, w, h, d) {
                    if boundary[j] && group_of[j] == usize::MAX {
                        group_of[j] = id;
                        comp.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        groups.push(comp);
    }
    let mut visited = vec![false; boundary.len()];
    let to_point = |i: usize| [i % w, i / w];
    let free_degree = |i: usize, visited: &[bool]| -> usize {
        N8.iter()
            .filter(|&&d| neighbour(i, w, h, d).is_some_and(|j| boundary[j] && !visited[j]))
            .count()
    };
    groups
        .iter()
        .map(|comp| {
            let mut lines = Vec::new();
            loop {
                // continue from an already traced pixel if possible (side branch)
                let branch = comp.iter().copied().find_map(|i| {
                    if visited[i] {
                        return None;
                    }
                    N8.iter()
                        .filter_map(|&d| neighbour(i, w, h, d))
                        .filter(|&j| boundary[j] && visited[j])
                        .min()
                        .map(|j| (j, i))
                });
                let (prefix, start) = match branch {
                    Some((j, i)) => (Some(j), i),
                    None => match comp
                        .iter()
                        .copied()
                        .filter(|&i| !visited[i])
                        .min_by_key(|&i| (free_degree(i, &visited), i))
                    {
                        Some(i) => (None, i),
                        None => break,
                    },
                };
                let mut line: Vec<Point> = prefix.into_iter().map(to_point).collect();
                let mut cur = start;
                visited[cur] = true;
                line.push(to_point(cur));
                loop {
                    let pick = |dirs: &[(isize, isize)], visited: &[bool]| {
                        dirs.iter()
                            .filter_map(|&d| neighbour(cur, w, h, d))
                            .filter(|&j| boundary[j] && !visited[j])
                            .min_by_key(|&j| (free_degree(j, visited), j))
                    };
                    let next = pick(&N4, &visited).or_else(|| pick(&N8, &visited));
                    match next {
                        Some(j) => {
                            visited[j] = true;
                            line.push(to_point(j));
                            cur = j;
                        }
                        None => break,
                    }
                }
                if line.len() >= 2 {
                    lines.push(line);
                }
            }
            lines
        })
        .collect()
}

/// Front extraction with the standard 750 m length filter.
pub fn extract_front(mask: &ZoneMask, rock_mask: Option<&ZoneMask>) -> Result<FrontSet> {
    extract_front_with(mask, rock_mask, MIN_FRONT_LENGTH_M)
}

pub fn extract_front_with(mask: &ZoneMask, rock_mask: Option<&ZoneMask>, min_length_m: f64) -> Result<FrontSet> {
    let post = postprocess(mask, rock_mask)?;
    let b = boundary_pixels(&post);
    let res = mask.resolution_m_per_px;
    let polylines = trace(&b, post.width, post.height)
        .into_iter()
        .filter(|lines| lines.iter().map(|l| polyline_length_px(l)).sum::<f64>() * res >= min_length_m)
        .flatten()
        .collect();
    Ok(FrontSet {
        resolution_m_per_px: res,
        polylines,
    })
}
