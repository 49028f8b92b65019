use std::collections::HashSet;

use graphshot::episodes::{
    sample_episode, sample_informative_episode, synth_dataset, DatasetSplit, EpisodeMode, EpisodeSpec, SynthSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn split(classes: usize, seed: u64) -> DatasetSplit {
    let mut spec = SynthSpec::new(classes, 16, 3.0);
    spec.images_per_class = 12;
    synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn classes_are_drawn_uniformly_over_ten_thousand_episodes() {
    let data = split(20, 1);
    let spec = EpisodeSpec::few_shot(5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let episodes = 10_000;
    let mut counts = vec![0usize; 20];
    let mut answers = [0usize; 5];
    for _ in 0..episodes {
        let e = sample_episode(&data, &spec, &mut rng).unwrap();
        for &c in &e.classes {
            counts[c] += 1;
        }
        answers[e.answer] += 1;
    }
    // Each class appears with probability 5/20 per episode.
    let p = 0.25;
    let expected = episodes as f64 * p;
    let sd = (episodes as f64 * p * (1.0 - p)).sqrt();
    for (c, &n) in counts.iter().enumerate() {
        assert!((n as f64 - expected).abs() < 4.0 * sd, "class {c}: {n} vs {expected}");
    }
    let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    // 19 degrees of freedom; the 0.999 quantile is 43.8.
    assert!(chi2 < 43.8, "chi-square {chi2}");
    let e = episodes as f64 / 5.0;
    let sd = (episodes as f64 * 0.2 * 0.8).sqrt();
    for &n in &answers {
        assert!((n as f64 - e).abs() < 4.0 * sd);
    }
}

#[test]
fn query_image_is_never_in_the_support_or_unlabeled_set() {
    let data = split(8, 3);
    let spec = EpisodeSpec::partially_labeled(5, 5, 0.4, EpisodeMode::Semi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let e = sample_episode(&data, &spec, &mut rng).unwrap();
        let images: Vec<_> = e.images().collect();
        let unique: HashSet<_> = images.iter().collect();
        assert_eq!(unique.len(), images.len());
        assert_eq!(e.query.class, e.classes[e.answer]);
        assert_eq!(e.labeled.len(), 10);
        assert_eq!(e.unlabeled.len(), 15);
    }
}

#[test]
fn informative_task_has_exactly_one_query_class_image_among_the_unlabeled() {
    let data = split(10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut positions = [0usize; 4];
    for _ in 0..2000 {
        let e = sample_informative_episode(&data, 5, 4, &mut rng).unwrap();
        let target = e.informative.unwrap();
        positions[target] += 1;
        let query_class = e.classes[e.answer];
        let hits: Vec<usize> =
            (0..e.unlabeled.len()).filter(|&i| e.unlabeled[i].class == query_class).collect();
        assert_eq!(hits, vec![target]);
        assert_eq!(e.unlabeled_labels[target], e.answer);
        assert!(e.labeled.iter().all(|(img, _)| img.class != query_class));
    }
    // The informative image lands in every position.
    assert!(positions.iter().all(|&n| n > 350), "{positions:?}");
}
