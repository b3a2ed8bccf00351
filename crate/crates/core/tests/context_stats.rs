use std::collections::HashMap;

use ctxmat::context::{self, degrade_resolution, multiply_prior, rollup, ContextSource, ContextValues, Hierarchy};
use ctxmat::maps::PredictionMap;
use ctxmat::stats::{entropy, granularity_study, CooccurrenceTable};
use ctxmat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

#[test]
fn broadcast_fills_every_pixel() {
    let s = ContextSource::scene_wide(names("p", 2), vec![0.7, 0.3]).unwrap();
    let map = context::broadcast(&s, 4, 4).unwrap();
    assert_eq!(map.shape(), &[2, 4, 4]);
    assert!(map.data()[..16].iter().all(|&v| v == 0.7));
    assert!(map.data()[16..].iter().all(|&v| v == 0.3));
}

#[test]
fn degrade_matches_block_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let out = degrade_resolution(&map, 2).unwrap();
    for c in 0..2 {
        for y in 0..8 {
            for x in 0..8 {
                let (by, bx) = (y / 2 * 2, x / 2 * 2);
                let mean = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| map.data()[(c * 8 + by + dy) * 8 + bx + dx])
                    .sum::<f64>()
                    / 4.0;
                assert!((out.data()[(c * 8 + y) * 8 + x] - mean).abs() < 1e-15);
            }
        }
    }
    assert!(degrade_resolution(&map, 1).unwrap().bit_eq(&map));
    let flat = Tensor::full(&[1, 16, 16], 0.25);
    for d in context::RESOLUTION_FACTORS {
        assert!(degrade_resolution(&flat, d).unwrap().bit_eq(&flat));
    }
}

fn two_level() -> Hierarchy {
    Hierarchy::new(
        vec!["top".into(), "leaf".into()],
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec!["x".into()], vec!["x".into()], vec!["y".into()]],
    )
    .unwrap()
}

#[test]
fn rollup_additivity_and_identity() {
    let h = two_level();
    let s = ContextSource::scene_wide(vec!["a".into(), "b".into(), "c".into()], vec![0.2, 0.3, 0.5]).unwrap();
    let up = rollup(&s, &h, "top").unwrap();
    match up.values() {
        ContextValues::SceneWide(p) => assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15),
        _ => panic!("kind changed"),
    }
    let same = rollup(&s, &h, "leaf").unwrap();
    assert_eq!(same.values(), s.values());
}

#[test]
fn rollup_matches_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let leaves = names("leaf", 12);
    let parents: Vec<usize> = (0..12).map(|_| rng.gen_range(0..4)).collect();
    let h = Hierarchy::new(
        vec!["group".into(), "leaf".into()],
        leaves.clone(),
        parents.iter().map(|p| vec![format!("g{p}")]).collect(),
    )
    .unwrap();
    let raw: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let up = rollup(&ContextSource::scene_wide(leaves, p.clone()).unwrap(), &h, "group").unwrap();
    let ContextValues::SceneWide(got) = up.values() else { panic!() };
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (gi, name) in up.categories().iter().enumerate() {
        let want: f64 = (0..12).filter(|&i| format!("g{}", parents[i]) == *name).map(|i| p[i]).sum();
        assert!((got[gi] - want).abs() < 1e-15);
    }
}

#[test]
fn multiply_prior_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::uniform(&[1, 4, 3, 3], -2.0, 2.0, &mut rng);
    let probs = PredictionMap::from_probs(ctxmat::ops::softmax_channel(&logits).unwrap()).unwrap();
    let uniform = multiply_prior(&probs, &[0.25; 4]).unwrap();
    assert_eq!(uniform.map.argmax(), probs.argmax());
    let onehot = multiply_prior(&probs, &[0.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(onehot.map.argmax().iter().all(|&k| k == 2));
}

#[test]
fn cooccurrence_matches_hashmap_tally() {
    let materials = names("m", 5);
    let contexts = names("c", 7);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: Vec<(usize, usize)> = (0..10_000).map(|_| (rng.gen_range(0..5), rng.gen_range(0..7))).collect();
    let mut oracle: HashMap<(usize, usize), u64> = HashMap::new();
    for &p in &pairs {
        *oracle.entry(p).or_default() += 1;
    }
    let mut t = CooccurrenceTable::new(materials.clone(), contexts.clone());
    t.accumulate(pairs.iter().map(|&(m, c)| (materials[m].as_str(), contexts[c].as_str())))
        .unwrap();
    for m in 0..5 {
        for c in 0..7 {
            assert_eq!(t.count(m, c), oracle.get(&(m, c)).copied().unwrap_or(0));
        }
    }
    let empty = CooccurrenceTable::new(materials, contexts);
    assert_eq!(empty.total(), 0);
}

#[test]
fn conditional_columns_are_normalized() {
    let t = CooccurrenceTable::from_counts(names("m", 3), names("c", 2), vec![vec![4, 0], vec![0, 0], vec![1, 0]]).unwrap();
    for alpha in [0.0, 0.5, 2.0] {
        let p = t.conditional(0, alpha).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let single = CooccurrenceTable::from_counts(names("m", 3), names("c", 1), vec![vec![0], vec![5], vec![0]]).unwrap();
    assert_eq!(single.conditional(0, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn entropy_anchors() {
    assert!((entropy(&[1.0 / 16.0; 16]) - 2.7726).abs() < 5e-5);
    assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
    assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
}

/// H(M|C) straight from the merged count columns.
fn brute_force(counts: &[Vec<u64>], assignment: &[usize], groups: usize) -> f64 {
    let nm = counts.len();
    let mut merged = vec![vec![0u64; groups]; nm];
    for (m, row) in counts.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            merged[m][assignment[c]] += n;
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    let mut h = 0.0;
    for g in 0..groups {
        let col: u64 = (0..nm).map(|m| merged[m][g]).sum();
        if col == 0 {
            continue;
        }
        let p: Vec<f64> = (0..nm).map(|m| merged[m][g] as f64 / col as f64).collect();
        h += col as f64 / total as f64 * entropy(&p);
    }
    h
}

#[test]
fn granularity_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let leaves = names("leaf", 8);
    let mid: Vec<usize> = (0..8).map(|i| i / 2).collect();
    let top: Vec<usize> = (0..8).map(|i| i / 4).collect();
    let h = Hierarchy::new(
        vec!["top".into(), "mid".into(), "leaf".into()],
        leaves.clone(),
        (0..8).map(|i| vec![format!("t{}", top[i]), format!("m{}", mid[i])]).collect(),
    )
    .unwrap();
    let counts: Vec<Vec<u64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(0..50)).collect()).collect();
    let t = CooccurrenceTable::from_counts(names("m", 5), leaves, counts.clone()).unwrap();
    let levels = granularity_study(&t, &h, None).unwrap();
    let identity: Vec<usize> = (0..8).collect();
    let want = [brute_force(&counts, &top, 2), brute_force(&counts, &mid, 4), brute_force(&counts, &identity, 8)];
    for (l, w) in levels.iter().zip(want) {
        assert!((l.expected_entropy - w).abs() < 1e-12, "{}: {} vs {w}", l.level, l.expected_entropy);
    }
}

#[test]
fn degenerate_and_independent_hierarchies() {
    let leaves = names("leaf", 4);
    let one = Hierarchy::new(
        vec!["a".into(), "b".into(), "leaf".into()],
        vec!["only".into()],
        vec![vec!["A".into(), "B".into()]],
    )
    .unwrap();
    let t = CooccurrenceTable::from_counts(names("m", 3), vec!["only".into()], vec![vec![3], vec![1], vec![4]]).unwrap();
    let hm = entropy(&t.material_marginal().unwrap());
    for l in granularity_study(&t, &one, None).unwrap() {
        assert!((l.expected_entropy - hm).abs() < 1e-12);
    }
    // columns proportional to the marginal: context carries no information
    let h = Hierarchy::new(
        vec!["top".into(), "leaf".into()],
        leaves.clone(),
        (0..4).map(|i| vec![format!("t{}", i / 2)]).collect(),
    )
    .unwrap();
    let t = CooccurrenceTable::from_counts(names("m", 2), leaves, vec![vec![1, 2, 3, 4], vec![3, 6, 9, 12]]).unwrap();
    let hm = entropy(&t.material_marginal().unwrap());
    for l in granularity_study(&t, &h, None).unwrap() {
        assert!((l.expected_entropy - hm).abs() < 1e-12);
    }
}

#[test]
fn csv_round_trip() {
    let t = CooccurrenceTable::from_counts(names("m", 2), names("c", 3), vec![vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap(), "material,c0,c1,c2\nm0,1,2,3\nm1,4,5,6\n");
    assert_eq!(CooccurrenceTable::read_csv(buf.as_slice()).unwrap(), t);
}
