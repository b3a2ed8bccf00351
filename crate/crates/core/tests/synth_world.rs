use std::collections::BTreeMap;

use ctxmat::io::patches::{extract_patches, PatchRule};
use ctxmat::maps::LabelMap;
use ctxmat::synth::{self, bayes_oracle, default_world, generate, make_splits, ContextMode, Texture, WorldSpec};
use ctxmat::Tensor;

fn fixture() -> serde_json::Value {
    serde_json::from_str(include_str!("fixtures/oracle.json")).unwrap()
}

/// Exact MAP accuracy by brute force: the observer sees the texture and the
/// context picked by `mode`, and guesses the most probable material.
fn reference_oracle(w: &WorldSpec, mode: ContextMode) -> f64 {
    let nm = w.num_materials();
    let texture_of: Vec<usize> = (0..nm)
        .map(|m| (0..nm).find(|&k| w.textures[k] == w.textures[m]).unwrap())
        .collect();
    let mut groups: BTreeMap<(Option<usize>, Option<usize>, usize), Vec<f64>> = BTreeMap::new();
    for p in 0..w.num_places() {
        for o in 0..w.num_objects() {
            let row = w.material_prob(p, o);
            for m in 0..nm {
                let mass = w.place_prior[p] * w.object_given_place[p][o] * row[m];
                let key = (
                    mode.uses_place().then_some(p),
                    mode.uses_object().then_some(o),
                    texture_of[m],
                );
                groups.entry(key).or_insert_with(|| vec![0.0; nm])[m] += mass;
            }
        }
    }
    groups.values().map(|v| v.iter().cloned().fold(0.0, f64::max)).sum()
}

#[test]
fn oracle_matches_reference_and_fixture() {
    let w = default_world();
    let f = fixture();
    for mode in ContextMode::ALL {
        let lib = bayes_oracle(&w, mode);
        let reference = reference_oracle(&w, mode);
        let frozen = f["bayes_oracle"][mode.name()].as_f64().unwrap();
        assert!((lib - reference).abs() < 1e-12, "{mode:?}: {lib} vs {reference}");
        assert!((lib - frozen).abs() < 1e-12, "{mode:?}: {lib} vs frozen {frozen}");
    }
    let [none, place, object, both] = ContextMode::ALL.map(|m| bayes_oracle(&w, m));
    assert!(both > object && object > none && both > place);
}

#[test]
fn ambiguity_rate_is_exact() {
    let w = default_world();
    let ambiguous: Vec<usize> = w.ambiguous_pairs.iter().flatten().copied().collect();
    let rate: f64 = w
        .material_marginal()
        .iter()
        .enumerate()
        .filter(|(m, _)| ambiguous.contains(m))
        .map(|(_, p)| p)
        .sum();
    assert!((rate - 0.4).abs() < 1e-12);
    assert!((w.measured_ambiguity_rate() - fixture()["ambiguity_rate"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn monte_carlo_agrees_with_exact_oracle() {
    let w = default_world();
    for mode in ContextMode::ALL {
        let (mean, se) = synth::monte_carlo_accuracy(&w, mode, 200_000, 11);
        assert!((mean - bayes_oracle(&w, mode)).abs() < 5.0 * se + 1e-9, "{mode:?}");
    }
}

fn distinct_textures(mut w: WorldSpec) -> WorldSpec {
    for (m, t) in w.textures.iter_mut().enumerate() {
        *t = Texture {
            base: [m as f64 / 8.0, 0.5, 0.5],
            ..t.clone()
        };
    }
    w.ambiguous_pairs.clear();
    w
}

#[test]
fn unambiguous_world_is_perfectly_predictable() {
    let w = distinct_textures(default_world());
    w.validate().unwrap();
    assert!((bayes_oracle(&w, ContextMode::None) - 1.0).abs() < 1e-12);
}

#[test]
fn even_ambiguous_pair_gives_half() {
    let mut w = distinct_textures(default_world());
    w.textures[1] = w.textures[0].clone();
    w.ambiguous_pairs = vec![[0, 1]];
    let row = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    w.material_given_object_place = None;
    w.material_given_object = Some(vec![row; 8]);
    w.validate().unwrap();
    assert!((bayes_oracle(&w, ContextMode::None) - 0.5).abs() < 1e-12);
}

#[test]
fn single_material_world_labels_everything_alike() {
    let mut w = default_world();
    w.materials = vec!["only".into()];
    w.textures.truncate(1);
    w.ambiguous_pairs.clear();
    w.material_given_object_place = None;
    w.material_given_object = Some(vec![vec![1.0]; 8]);
    for s in generate(&w, 5, 32).unwrap() {
        assert!(s.labels.raw().iter().all(|&l| l == 0));
    }
}

#[test]
fn generation_is_deterministic() {
    let w = default_world();
    let a = generate(&w, 6, 32).unwrap();
    let b = generate(&w, 6, 32).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.image.bit_eq(&y.image));
    }
}

#[test]
fn empirical_material_given_object_matches_tables() {
    let w = default_world();
    let scenes = generate(&w, 10_000, 32).unwrap();
    let (no, nm) = (w.num_objects(), w.num_materials());
    let mut counts = vec![vec![0u64; nm]; no];
    for s in &scenes {
        for (&l, &o) in s.labels.raw().iter().zip(&s.objects) {
            counts[o as usize][l as usize] += 1;
        }
    }
    let expected = w.material_given_object_marginal();
    for o in 0..no {
        let total: u64 = counts[o].iter().sum();
        assert!(total > 0);
        let tv: f64 = (0..nm)
            .map(|m| (counts[o][m] as f64 / total as f64 - expected[o][m]).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "object {o}: total variation {tv}");
    }
}

#[test]
fn splits_are_sized_stable_and_disjoint() {
    let items: Vec<usize> = (0..100).collect();
    let a = make_splits(items.clone(), 0.8, 4).unwrap();
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
    assert_eq!(a, make_splits(items, 0.8, 4).unwrap());
    let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}

#[test]
fn strict_patches_never_straddle_a_boundary() {
    let (h, w) = (48, 64);
    let labels = LabelMap::new(h, w, (0..h * w).map(|i| if i % w < 24 { 0 } else { 1 }).collect()).unwrap();
    let image = Tensor::zeros(&[3, h, w]);
    let rule = PatchRule { size: 16, stride: 4, strict: true, mixed: false };
    let patches = extract_patches(&image, None, &labels, rule, 0).unwrap();
    let mut expected = Vec::new();
    for y in (0..=h - 16).step_by(4) {
        for x in (0..=w - 16).step_by(4) {
            if x + 16 <= 24 || x >= 24 {
                expected.push((y, x));
            }
        }
    }
    let got: Vec<(usize, usize)> = patches.iter().map(|p| (p.y, p.x)).collect();
    assert_eq!(got, expected);
    for p in &patches {
        let first = p.labels.raw()[0];
        assert!(p.labels.raw().iter().all(|&l| l == first));
    }
}
