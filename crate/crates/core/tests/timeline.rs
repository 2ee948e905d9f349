use emgd::streams::{
    build_parallel_split, generate_synthetic, SplitConfig, SplitManifest, SyntheticConfig,
    TaskTimeline,
};
use emgd::MEMORY_TASK;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn generated_timelines_cover_every_tick(
        durations in prop::collection::vec(1u64..40, 1..8),
        serial in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let tasks: Vec<(usize, u64)> = durations.iter().enumerate().map(|(i, d)| (i + 1, *d)).collect();
        let tl = TaskTimeline::generate(&tasks, serial, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(tl.first_tick(), 0);
        for (e, (id, d)) in tl.entries().iter().zip(&tasks) {
            prop_assert_eq!(e.task_id, *id);
            prop_assert_eq!(e.end - e.start + 1, *d);
        }
        for w in tl.entries().windows(2) {
            prop_assert!(w[0].start <= w[1].start);
            if serial {
                prop_assert_eq!(w[1].start, w[0].end + 1);
            }
        }
        for tick in tl.first_tick()..=tl.last_tick() {
            let active = tl.active_tasks(tick).unwrap();
            let live: Vec<_> = active.iter().copied().filter(|t| *t != MEMORY_TASK).collect();
            prop_assert!(!live.is_empty(), "tick {} has no live task", tick);
            let memory = tl.entries().iter().any(|e| e.end < tick);
            prop_assert_eq!(active.first() == Some(&MEMORY_TASK), memory);
            prop_assert!(active.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(tl.active_tasks(tl.last_tick() + 1).is_err());
    }

    #[test]
    fn manifest_replay_is_exact(seed in 0u64..500, overlap in 0.0f64..=1.0) {
        let dataset = generate_synthetic(
            &SyntheticConfig {
                classes: 8,
                input_dim: 4,
                noise_sigma: 0.1,
                samples_per_class: 6,
                test_samples_per_class: 2,
            },
            7,
        )
        .unwrap();
        let cfg = SplitConfig {
            overlap_fraction: overlap,
            batch_size: 4,
            ..SplitConfig::new(3, (2, 4))
        };
        let (specs, timeline) = build_parallel_split(&dataset, &cfg, seed).unwrap();
        let manifest = SplitManifest::from_split(&specs, &timeline, seed).unwrap();
        let text = serde_json::to_string(&manifest).unwrap();
        let back: SplitManifest = serde_json::from_str(&text).unwrap();
        let (specs2, timeline2) = back.apply(&dataset).unwrap();
        prop_assert_eq!(timeline.entries(), timeline2.entries());
        for (a, b) in specs.iter().zip(&specs2) {
            prop_assert_eq!(&a.label_set, &b.label_set);
            prop_assert_eq!(&a.train.labels, &b.train.labels);
            prop_assert_eq!(&a.train.inputs, &b.train.inputs);
            prop_assert_eq!(&a.test.labels, &b.test.labels);
        }
    }
}
