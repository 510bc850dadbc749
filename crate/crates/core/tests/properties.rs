use contralab_core::config::ExperimentConfig;
use contralab_core::contrastive::{infonce_loss, similarity_matrix, LabelMatrix};
use contralab_core::eval::retrieval_report;
use contralab_core::numerics::l2_normalize_rows;
use contralab_core::sampling::{build_debiased_epoch, EpochPlan, SourceCatalog};
use contralab_core::synthdata::{corrupt_text, CorpusSpec};
use contralab_core::{Matrix, SeedContext};
use proptest::prelude::*;

fn unit_rows(n: usize, d: usize, seed: u64, label: &str) -> Matrix {
    l2_normalize_rows(&Matrix::random_uniform(n, d, 1.0, &SeedContext::new(seed, label))).unwrap().0
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut SeedContext::new(seed, "perm").rng());
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_jointly_permuting_pairs(n in 2usize..24, d in 2usize..10, seed in any::<u64>(), tau in 0.01f64..1.0) {
        let img = unit_rows(n, d, seed, "img");
        let txt = unit_rows(n, d, seed, "txt");
        let p = permutation(n, seed);
        let id = LabelMatrix::identity(n);
        let a = infonce_loss(&similarity_matrix(&img, &txt, tau).unwrap(), &id, &id).unwrap();
        let b = infonce_loss(&similarity_matrix(&img.select_rows(&p), &txt.select_rows(&p), tau).unwrap(), &id, &id).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        // lower bound at uniform probabilities is 0, upper bound is finite
        prop_assert!(a >= 0.0 && a.is_finite());
    }

    #[test]
    fn retrieval_ignores_embedding_scale(n in 1usize..40, seed in any::<u64>(), scale in 0.01f64..100.0) {
        let img = Matrix::random_uniform(n, 5, 1.0, &SeedContext::new(seed, "i"));
        let txt = Matrix::random_uniform(n, 5, 1.0, &SeedContext::new(seed, "t"));
        let a = retrieval_report(&img, &txt).unwrap();
        let b = retrieval_report(&img.scaled(scale), &txt).unwrap();
        prop_assert_eq!(a.recalls(), b.recalls());
        prop_assert!(a.rsum >= 0.0 && a.rsum <= 600.0);
    }

    #[test]
    fn debiased_plans_survive_a_text_round_trip(sizes in prop::collection::vec(1usize..60, 1..5), b in 1usize..16, seed in any::<u64>()) {
        let mut next = 0;
        let cat = SourceCatalog::new(
            sizes.iter().enumerate().map(|(i, &n)| {
                let idx = (next..next + n).collect();
                next += n;
                (i as u32, idx)
            }).collect(),
        ).unwrap();
        let built = build_debiased_epoch(&cat, b, &SeedContext::new(seed, "plan"));
        if sizes.iter().all(|&n| n < b) {
            // an epoch with no batches is refused rather than silently empty
            prop_assert!(built.is_err());
            return Ok(());
        }
        let plan = built.unwrap();
        prop_assert_eq!(plan.batches.len(), sizes.iter().map(|n| n / b).sum::<usize>());
        prop_assert_eq!(EpochPlan::from_text(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn corruption_keeps_a_nonempty_caption(len in 1usize..30, seed in any::<u64>()) {
        let caption: Vec<u32> = (0..len as u32).map(|t| 2 + t % 40).collect();
        let out = corrupt_text(&caption, 64, &SeedContext::new(seed, "c"));
        prop_assert!(!out.is_empty() && out.len() <= caption.len());
        prop_assert!(out.iter().all(|&t| t < 64));
    }

    #[test]
    fn config_snapshot_round_trips(seed in any::<u64>(), lr in 1e-6f64..1e-1, batch in 1usize..8, alpha in 0.01f64..2.0) {
        let text = format!(
            "sampler = debiased-kmeans\nbatch_size = {}\nepochs = 2\nmode = dga:{}\nlr = {lr}\nmixup = on\nmixup_alpha = {alpha}\nseed = {seed}\n",
            batch * 4,
            batch
        );
        let cfg = ExperimentConfig::parse(&text, &[]).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_text(), &[]).unwrap();
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn preset_corpus_is_valid_and_biased() {
    let spec = CorpusSpec::biased_three_source([300, 200, 100], 8, &SeedContext::new(0, "spec"));
    spec.validate().unwrap();
    assert_eq!(spec.sources.len(), 3);
    spec.unbiased().validate().unwrap();
    assert_ne!(spec.unbiased(), spec);
}
