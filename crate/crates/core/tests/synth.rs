use std::collections::VecDeque;

use gfk_core::experiment::synth_split;
use gfk_core::synth::SynthConfig;
use gfk_core::zones::{ZoneMask, OIM, ROCK};

/// Rock pixels not 4-connected to the image border through rock.
fn enclosed_rock(m: &ZoneMask) -> Vec<bool> {
    let (w, h) = (m.width, m.height);
    let mut outer = vec![false; w * h];
    let mut queue: VecDeque<usize> = (0..w * h)
        .filter(|&i| {
            let (x, y) = (i % w, i / w);
            (x == 0 || y == 0 || x == w - 1 || y == h - 1) && m.classes[i] == ROCK
        })
        .collect();
    for &i in &queue {
        outer[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut near = Vec::new();
        if x > 0 {
            near.push(i - 1);
        }
        if x + 1 < w {
            near.push(i + 1);
        }
        if y > 0 {
            near.push(i - w);
        }
        if y + 1 < h {
            near.push(i + w);
        }
        for j in near {
            if m.classes[j] == ROCK && !outer[j] {
                outer[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..w * h).map(|i| m.classes[i] == ROCK && !outer[i]).collect()
}

#[test]
fn outcrops_are_static_and_away_from_water() {
    let series = synth_split(&SynthConfig::heavy(), 12, 6, 5, 0).unwrap();
    let mut with = 0;
    for s in &series {
        let first = enclosed_rock(&s.frames[0].mask);
        with += first.iter().any(|&b| b) as usize;
        for f in &s.frames {
            let m = &f.mask;
            assert_eq!(enclosed_rock(m), first);
            for (i, _) in first.iter().enumerate().filter(|(_, &b)| b) {
                let (x, y) = (i % m.width, i / m.width);
                for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    assert_ne!(m.get(nx as usize, ny as usize), OIM, "outcrop at ({x}, {y}) touches water");
                }
            }
        }
    }
    assert!(with >= 8, "only {with} of 12 scenes have outcrops");
    let none = SynthConfig {
        nunataks: 0,
        ..SynthConfig::heavy()
    };
    for s in synth_split(&none, 6, 2, 5, 0).unwrap() {
        assert!(!enclosed_rock(&s.frames[0].mask).iter().any(|&b| b));
    }
}
