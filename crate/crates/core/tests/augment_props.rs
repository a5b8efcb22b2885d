mod common;

use common::invariants::*;
use egoscale::augment::{
    apply_policy, resized_crop, sample_crop, AugmentPolicy, Transform, BLUR_SIGMA, DEFAULT_RATIO,
};
use egoscale::seed;
use proptest::prelude::*;

/// Every pre-normalization transform, with the colour steps always on.
fn everything_policy(size: usize) -> AugmentPolicy {
    AugmentPolicy::new(vec![
        Transform::RandomResizedCrop {
            size,
            scale: (0.08, 1.0),
            ratio: DEFAULT_RATIO,
        },
        Transform::ColorJitter {
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
            hue: 0.5,
            p: 1.0,
        },
        Transform::RandomGrayscale { p: 0.5 },
        Transform::GaussianBlur {
            sigma: BLUR_SIGMA,
            p: 1.0,
        },
        Transform::Solarize {
            threshold: 0.5,
            p: 0.5,
        },
        Transform::HorizontalFlip { p: 0.5 },
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pre_normalization_outputs_stay_in_unit_range(h in 4usize..40, w in 4usize..40, size in 2usize..24, s in any::<u64>()) {
        let img = random_image(h, w, s);
        let out = apply_policy(&img, &everything_policy(size), s ^ 0x55);
        prop_assert_eq!((out.height(), out.width()), (size, size));
        prop_assert!(out.in_unit_range());
    }

    #[test]
    fn crops_have_the_requested_size(
        h in 1usize..80,
        w in 1usize..80,
        size in 1usize..40,
        lo in 0.01f64..1.0,
        span in 0.0f64..1.0,
        r_lo in 0.2f64..1.0,
        r_span in 0.0f64..4.0,
        s in any::<u64>(),
    ) {
        let scale = (lo, (lo + span).min(1.0));
        let ratio = (r_lo, r_lo + r_span);
        let mut rng = seed::rng(&[s]);
        let rect = sample_crop(h, w, scale, ratio, &mut rng);
        prop_assert!(rect.height >= 1 && rect.width >= 1);
        prop_assert!(rect.top + rect.height <= h && rect.left + rect.width <= w);
        let out = resized_crop(&random_image(h, w, s), rect, size);
        prop_assert_eq!((out.height(), out.width()), (size, size));
    }

    #[test]
    fn pixelwise_identities(h in 1usize..24, w in 1usize..24, s in any::<u64>()) {
        let img = random_image(h, w, s);
        prop_assert!(normalize_roundtrip_error(&img) <= IDENTITY_TOL);
        prop_assert_eq!(flip_involution_error(&img), 0.0);
        prop_assert!(grayscale_idempotence_error(&img) <= IDENTITY_TOL);
        prop_assert_eq!(rotation4_error(&img), 0.0);
    }

    #[test]
    fn policies_are_deterministic_in_the_seed(s in any::<u64>()) {
        let img = random_image(20, 24, s);
        for p in [AugmentPolicy::temporal_classification(16), AugmentPolicy::mild(16), AugmentPolicy::finetune(16)] {
            prop_assert_eq!(apply_policy(&img, &p, s), apply_policy(&img, &p, s));
        }
    }
}
