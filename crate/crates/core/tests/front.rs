use std::collections::BTreeSet;

use gfk_core::experiment::synth_split;
use gfk_core::front::{extract_front, extract_front_with, fill_holes, postprocess};
use gfk_core::synth::SynthConfig;
use gfk_core::zones::{FrontSet, Point, ZoneMask, GLACIER, NA, OIM, ROCK};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent flood fill: the 4-connected region of `pred` pixels containing `start`.
fn region(w: usize, h: usize, start: (usize, usize), pred: impl Fn(usize, usize) -> bool) -> BTreeSet<(usize, usize)> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some((x, y)) = stack.pop() {
        if !pred(x, y) || !seen.insert((x, y)) {
            continue;
        }
        if x > 0 {
            stack.push((x - 1, y));
        }
        if y > 0 {
            stack.push((x, y - 1));
        }
        if x + 1 < w {
            stack.push((x + 1, y));
        }
        if y + 1 < h {
            stack.push((x, y + 1));
        }
    }
    seen
}

/// OIM pixels of `m` that 4-neighbour glacier.
fn border_oracle(m: &ZoneMask) -> Vec<Point> {
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) != OIM {
                continue;
            }
            let near = [(0, -1), (-1, 0), (1, 0), (0, 1)].iter().any(|&(dx, dy): &(isize, isize)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < m.width
                    && (ny as usize) < m.height
                    && m.get(nx as usize, ny as usize) == GLACIER
            });
            if near {
                out.push([x, y]);
            }
        }
    }
    out.sort_unstable();
    out
}

fn fill_oracle(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !fg[y * w + x] {
                outside.extend(region(w, h, (x, y), |a, b| !fg[b * w + a]));
            }
        }
    }
    (0..w * h).map(|i| !outside.contains(&(i % w, i / w))).collect()
}

fn bools(rows: &[&str]) -> (Vec<bool>, usize, usize) {
    let v = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
    (v, rows[0].len(), rows.len())
}

#[test]
fn two_blobs_keep_the_larger() {
    let rows = [
        "22222222", //
        "23332222", //
        "23332222", //
        "22222222", //
        "22222222", //
        "22222332", //
        "22222232", //
        "22222222",
    ];
    let m = ZoneMask::from_rows(&rows, 100.0).unwrap();
    let big = region(8, 8, (1, 1), |x, y| m.get(x, y) == OIM);
    let small = region(8, 8, (5, 5), |x, y| m.get(x, y) == OIM);
    assert_eq!((big.len(), small.len()), (6, 3));
    let post = postprocess(&m, None).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let want = if big.contains(&(x, y)) { OIM } else { GLACIER };
            assert_eq!(post.get(x, y), want);
        }
    }
    let f = extract_front_with(&m, None, 0.0).unwrap();
    f.check().unwrap();
    let want: Vec<Point> = big.iter().map(|&(x, y)| [x, y]).collect();
    assert_eq!(f.point_set(), want);
    // the 6-pixel border is far below 750 m, so the filtered result is empty
    assert!(extract_front(&m, None).unwrap().is_empty());
}

#[test]
fn all_glacier_has_no_front() {
    let m = ZoneMask::filled(8, 8, GLACIER, 50.0);
    assert!(extract_front(&m, None).unwrap().is_empty());
    let m = ZoneMask::filled(8, 8, OIM, 50.0);
    assert!(extract_front(&m, None).unwrap().is_empty());
}

#[test]
fn length_threshold() {
    // 9 boundary pixels in a row are 8 unit steps
    let rows = ["222222222", "333333333"];
    let f = extract_front(&ZoneMask::from_rows(&rows, 100.0).unwrap(), None).unwrap();
    assert_eq!(f.polylines.len(), 1);
    assert!((f.length_m(&f.polylines[0]) - 800.0).abs() < 1e-9);
    assert!(extract_front(&ZoneMask::from_rows(&rows, 90.0).unwrap(), None).unwrap().is_empty());
}

#[test]
fn hole_filling_shapes() {
    let solid = ["....", ".##.", ".##.", "...."];
    let donut = ["#####", "#...#", "#.#.#", "#...#", "#####"];
    let c_shape = ["#####", "#....", "#.###", "#...#", "#####"];
    let (s, w, h) = bools(&solid);
    assert_eq!(fill_holes(&s, w, h), s);
    let (d, w, h) = bools(&donut);
    assert!(fill_holes(&d, w, h).iter().all(|&b| b));
    assert_eq!(fill_holes(&d, w, h), fill_oracle(&d, w, h));
    let (c, w, h) = bools(&c_shape);
    assert_eq!(fill_holes(&c, w, h), c);
}

#[test]
fn donut_front_is_filled_component_border() {
    // glacier island inside the OIM ring becomes OIM; the ring's outer border remains
    let rows = [
        "2222222222", //
        "2333333332", //
        "2333333332", //
        "2332222332", //
        "2332222332", //
        "2333333332", //
        "2333333332", //
        "2222222222",
    ];
    let m = ZoneMask::from_rows(&rows, 100.0).unwrap();
    let post = postprocess(&m, None).unwrap();
    assert!((3..5).all(|y| (3..7).all(|x| post.get(x, y) == OIM)));
    let f = extract_front(&m, None).unwrap();
    assert_eq!(f.point_set(), border_oracle(&post));
    assert_eq!(f.num_points(), f.point_set().len());
}

/// Random masks: a synthetic scene with OIM and glacier speckles sprinkled in.
fn noisy_masks(count: usize, seed: u64) -> Vec<ZoneMask> {
    let cfg = SynthConfig {
        size: 64,
        ..SynthConfig::default()
    };
    let series = synth_split(&cfg, count, 1, seed, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    series
        .into_iter()
        .map(|s| {
            let mut m = s.frames[0].mask.clone();
            let flips = rng.random_range(0..60);
            for _ in 0..flips {
                let i = rng.random_range(0..m.classes.len());
                m.classes[i] = if rng.random_bool(0.5) { OIM } else { GLACIER };
            }
            m
        })
        .collect()
}

#[test]
fn flips_commute_with_extraction() {
    for m in noisy_masks(100, 3) {
        let (w, h) = (m.width, m.height);
        let f = extract_front(&m, None).unwrap().point_set();
        let fh = extract_front(&m.flip_h(), None).unwrap();
        let fv = extract_front(&m.flip_v(), None).unwrap();
        let mut back_h = fh.map_points(|[x, y]| [w - 1 - x, y]).point_set();
        let mut back_v = fv.map_points(|[x, y]| [x, h - 1 - y]).point_set();
        back_h.sort_unstable();
        back_v.sort_unstable();
        assert_eq!(back_h, f);
        assert_eq!(back_v, f);
    }
}

#[test]
fn properties_on_noisy_masks() {
    for m in noisy_masks(40, 4) {
        let post = postprocess(&m, None).unwrap();
        let f = extract_front(&m, None).unwrap();
        f.check().unwrap();
        // every point is an OIM pixel bordering glacier after post-processing
        let border = border_oracle(&post);
        for p in f.points() {
            assert!(border.binary_search(&p).is_ok(), "{p:?}");
        }
        // rewriting with the surviving component changes nothing
        assert_eq!(extract_front(&post, None).unwrap(), f);
        // the filter only removes lines
        let all = extract_front_with(&m, None, 0.0).unwrap();
        assert!(all.polylines.len() >= f.polylines.len());
        // only isolated boundary pixels, which cannot form a polyline, are dropped
        let traced = all.point_set();
        for p in &border {
            if traced.binary_search(p).is_err() {
                let isolated = border
                    .iter()
                    .all(|q| q == p || q[0].abs_diff(p[0]) > 1 || q[1].abs_diff(p[1]) > 1);
                assert!(isolated, "{p:?} missing from the traced front");
            }
        }
        // NA and rock are interchangeable away from OIM
        let mut swapped = m.clone();
        let (w, h) = (m.width, m.height);
        let oim_near = |x: usize, y: usize| {
            let xs = x.saturating_sub(1)..(x + 2).min(w);
            xs.clone().any(|a| (y.saturating_sub(1)..(y + 2).min(h)).any(|b| m.get(a, b) == OIM))
        };
        for y in 0..h {
            for x in 0..w {
                let c = m.get(x, y);
                if !oim_near(x, y) && (c == NA || c == ROCK) {
                    swapped.set(x, y, if c == NA { ROCK } else { NA });
                }
            }
        }
        assert_eq!(extract_front(&swapped, None).unwrap(), f);
    }
}

#[test]
fn rock_overlay_removes_front_behind_it() {
    let rows = ["2222222222", "3333333333", "3333333333"];
    let m = ZoneMask::from_rows(&rows, 200.0).unwrap();
    let mut rock = ZoneMask::filled(10, 3, GLACIER, 200.0);
    for x in 0..5 {
        rock.set(x, 1, ROCK);
    }
    let f = extract_front(&m, Some(&rock)).unwrap();
    assert_eq!(f.point_set(), (5..10).map(|x| [x, 1]).collect::<Vec<_>>());
    let small = ZoneMask::filled(3, 3, ROCK, 100.0);
    assert!(extract_front(&m, Some(&small)).is_err());
}

#[test]
fn front_json_roundtrip() {
    let m = ZoneMask::from_rows(&["222222222", "333333333"], 100.0).unwrap();
    let f = extract_front(&m, None).unwrap();
    let back = FrontSet::from_json(&f.to_json()).unwrap();
    assert_eq!(back, f);
    assert!(FrontSet::from_json(r#"{"resolution_m_per_px": 1.0, "fronts": [[[0,0],[2,0]]]}"#).is_err());
    assert!(FrontSet::from_json(r#"{"resolution_m_per_px": 0.0, "fronts": []}"#).is_err());
}

fn blob(w: usize, h: usize, steps: &[u8]) -> Vec<bool> {
    let mut fg = vec![false; w * h];
    let (mut x, mut y) = (w / 2, h / 2);
    fg[y * w + x] = true;
    for &d in steps {
        match d % 4 {
            0 if x + 1 < w => x += 1,
            1 if x > 0 => x -= 1,
            2 if y + 1 < h => y += 1,
            3 if y > 0 => y -= 1,
            _ => {}
        }
        fg[y * w + x] = true;
    }
    fg
}

proptest! {
    #[test]
    fn fill_matches_oracle(steps in prop::collection::vec(0u8..4, 0..120)) {
        let (w, h) = (12, 10);
        let fg = blob(w, h, &steps);
        prop_assert_eq!(fill_holes(&fg, w, h), fill_oracle(&fg, w, h));
    }
}
