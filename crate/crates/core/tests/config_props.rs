use proptest::prelude::*;
use vpk_core::config::RunConfig;
use vpk_core::model::LossSpan;
use vpk_core::pen::{FusionMode, PenInit};
use vpk_core::train::Injection;

proptest! {
    #[test]
    fn json_round_trip_is_identity(
        tau in -1.0f64..2.0,
        lr in 1e-6f64..1.0,
        steps in 0u64..100_000,
        concat in any::<bool>(),
        zero_last in any::<bool>(),
        no_prompt in any::<bool>(),
        ocr in any::<bool>(),
        full_text in any::<bool>(),
        salt in "[ -~]{0,12}",
        seed in any::<u64>(),
    ) {
        let mut c = RunConfig::default();
        c.tau = tau;
        c.train.lr = lr;
        c.train.steps = steps;
        c.train.seed = seed;
        c.train.loss_span = if full_text { LossSpan::FullText } else { LossSpan::Answer };
        c.model.fusion = if concat { FusionMode::Concat } else { FusionMode::Addition };
        c.model.pen_init = if zero_last { PenInit::ZeroLast } else { PenInit::Kaiming };
        c.injection = if no_prompt { Injection::None } else { Injection::VisualPrompt };
        c.ocr_enabled = ocr;
        c.embedder.salt = salt;
        prop_assert_eq!(RunConfig::from_json(c.to_json().as_bytes()).unwrap(), c);
    }
}
