//! The full finite-difference suite: every graph operation plus both losses.

use crate::numerics::gradcheck::{op_cases, GradCase, Sampler};
use crate::parm::bce_loss;
use crate::perception::acl_loss;
use crate::scalar::Scalar;

pub fn loss_cases<T: Scalar>() -> Vec<GradCase<T>> {
    vec![
        GradCase::new(
            "acl_loss",
            vec![([8, 6].to_vec(), Sampler::AwayFromZero), ([8, 6].to_vec(), Sampler::AwayFromZero)],
            |g, v| acl_loss(g, v[0], v[1], &[1, 3], 1.0),
        ),
        GradCase::new("bce_loss", vec![([3, 4].to_vec(), Sampler::Uniform(-3.0, 3.0))], |g, v| {
            bce_loss(g, v[0], &[0, 2, 3], false)
        }),
    ]
}

pub fn gradient_suite<T: Scalar>() -> Vec<GradCase<T>> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{run_cases, GradcheckOptions};

    #[test]
    fn losses_pass_in_both_precisions() {
        for c in run_cases(&loss_cases::<f32>(), &GradcheckOptions::single()).cases {
            assert!(c.passed, "{c:?}");
        }
        for c in run_cases(&loss_cases::<f64>(), &GradcheckOptions::double()).cases {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(gradient_suite::<f32>().len(), op_cases::<f32>().len() + 2);
    }
}
