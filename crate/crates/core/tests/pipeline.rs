use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixelseed::eval::{evaluate, gt_from_labels, Detection, EvalConfig};
use pixelseed::proposer::{propose, ProposerConfig};
use pixelseed::scene::{
    load_embedding, load_labels, load_scores, save_embedding, save_labels, save_scores, validate_scene,
};
use pixelseed::synth::{
    count_components, fit_embedding, generate_scene, oracle_scores, FitConfig, SceneSpec, ShapeFamily,
};
use pixelseed::EmbeddingField;

fn random_spec(rng: &mut ChaCha8Rng) -> SceneSpec {
    let all = [ShapeFamily::Rectangle, ShapeFamily::Ellipse, ShapeFamily::Split];
    let mut families: Vec<ShapeFamily> = all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
    if families.is_empty() {
        families.push(all[rng.random_range(0..3)]);
    }
    let min_instances = rng.random_range(1..=3);
    SceneSpec {
        height: rng.random_range(32..=64),
        width: rng.random_range(32..=64),
        min_instances,
        max_instances: rng.random_range(min_instances..=5),
        num_classes: rng.random_range(1..=6),
        families,
        min_visible: rng.random_range(4..=16),
        seed: rng.random(),
    }
}

#[test]
fn generated_scenes_satisfy_their_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..1000 {
        let spec = random_spec(&mut rng);
        let scene = generate_scene(&spec).unwrap_or_else(|e| panic!("{spec:?}: {e}"));
        let labels = &scene.labels;
        let (h, w) = (labels.height(), labels.width());
        assert_eq!((h, w), (spec.height, spec.width));
        let zeros = EmbeddingField::new(h, w, 2, vec![0.0; h * w * 2]).unwrap();
        assert!(validate_scene(&zeros, labels, None).is_empty(), "{spec:?}");

        let n = labels.num_instances();
        assert!((spec.min_instances..=spec.max_instances).contains(&n), "{spec:?}");
        let sizes = labels.label_sizes();
        assert!(sizes[0] >= 1);
        assert!(sizes[1..].iter().all(|&s| s >= spec.min_visible), "{spec:?}");
        for id in 1..=n as u16 {
            let class = labels.class_of(id).unwrap();
            assert!((1..=spec.num_classes).contains(&class));
        }
        if n >= 3 {
            let split = (1..=n as u16).any(|id| count_components(labels.labels(), h, w, id) >= 2);
            assert!(split, "{spec:?} has no disconnected instance");
        }
        assert_eq!(scene.image.shape(), &[h, w, 3]);
    }
}

#[test]
fn scene_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneSpec { seed: 5, ..SceneSpec::default() }).unwrap();
    let fit = fit_embedding(
        &scene.labels,
        &FitConfig { dim: 4, iterations: 20, seed: 5, ..FitConfig::default() },
    )
    .unwrap();
    let scores = oracle_scores(&fit.field, &scene.labels, &[0.25, 0.5, 0.75], 4, 0.5, 0.01).unwrap();

    save_labels(dir.path(), &scene.labels).unwrap();
    save_embedding(dir.path(), &fit.field).unwrap();
    save_scores(dir.path(), &scores).unwrap();

    assert_eq!(load_labels(dir.path()).unwrap(), scene.labels);
    assert_eq!(load_embedding(dir.path()).unwrap(), fit.field);
    assert_eq!(load_scores(dir.path()).unwrap(), Some(scores));
}

#[test]
fn fitted_scenes_yield_proposals_covering_every_instance() {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (image, seed) in (40..44).enumerate() {
        let scene = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
        let fit = fit_embedding(
            &scene.labels,
            &FitConfig { dim: 16, iterations: 300, seed, ..FitConfig::default() },
        )
        .unwrap();
        let config = ProposerConfig::default();
        let scores = oracle_scores(&fit.field, &scene.labels, &config.tau_cls, 4, 0.5, 0.01).unwrap();
        let proposals = propose(&fit.field, &scores, &config).unwrap();
        assert!(proposals.len() <= config.num_seeds);
        dets.extend(proposals.iter().map(|p| Detection::from_proposal(image, p)));
        gts.push(gt_from_labels(&scene.labels));
    }
    let report = evaluate(&dets, &gts, &EvalConfig { budgets: vec![20], ..EvalConfig::default() }).unwrap();
    assert!(report.recall[0].recall_at_50 >= 0.9, "{}", report.to_table());
    assert!(report.map_at(0.5).unwrap() > 0.0);
}
