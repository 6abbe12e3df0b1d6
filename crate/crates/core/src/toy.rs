//! Small edit oracles used by the self-checks, examples and tests.
//!
//! Both use one source ref `"src"` and one instruction ref `"edit"`, unit
//! variances, and an image branch equal to the unconditional one, so the
//! whole instruction signal sits in the image-text branch.

use crate::oracle::{AnalyticOracle, Condition, EditOracle, GaussianMixture};
use crate::schedule::ScheduleKind;

pub const SOURCE_REF: &str = "src";
pub const TEXT_REF: &str = "edit";

pub fn edit_condition() -> Condition {
    Condition::image_text(SOURCE_REF, TEXT_REF)
}

fn build(prior: GaussianMixture, text: GaussianMixture) -> EditOracle {
    EditOracle::new(prior.clone())
        .with_image(SOURCE_REF, prior)
        .with_image_text(SOURCE_REF, TEXT_REF, text)
}

/// Prior is an even mixture of `A = 0` and `B = shift * 1`; the instruction
/// branch is `B` alone. Editing moves samples by `B - A`.
pub fn shift_oracle(dim: usize, shift: f64) -> EditOracle {
    let a = vec![0.0; dim];
    let b = vec![shift; dim];
    let prior = GaussianMixture::new(vec![0.5, 0.5], vec![a, b.clone()], vec![vec![1.0; dim]; 2])
        .expect("valid mixture");
    build(prior, GaussianMixture::isotropic(b, 1.0).expect("valid mixture"))
}

/// Prior has components at `0`, `+shift * 1` and `-shift * 1`; the instruction
/// branch is an even mixture of the two shifted ones, so each sample may
/// follow the instruction in two equally good ways.
pub fn bimodal_oracle(dim: usize, shift: f64) -> EditOracle {
    let a = vec![0.0; dim];
    let up = vec![shift; dim];
    let down = vec![-shift; dim];
    let third = 1.0 / 3.0;
    let prior = GaussianMixture::new(
        vec![third, third, 1.0 - 2.0 * third],
        vec![a, up.clone(), down.clone()],
        vec![vec![1.0; dim]; 3],
    )
    .expect("valid mixture");
    let text = GaussianMixture::new(vec![0.5, 0.5], vec![up, down], vec![vec![1.0; dim]; 2]).expect("valid mixture");
    build(prior, text)
}

pub fn analytic(edit: EditOracle) -> AnalyticOracle {
    AnalyticOracle::new(edit, ScheduleKind::VpCosine)
}
