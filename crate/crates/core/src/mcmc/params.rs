//! Flat parameter layout shared by traces, summaries and the study.

use crate::model::JointParams;
use crate::sni::MixingFamily;

/// Names of the traced parameters, in trace-column order.
pub fn parameter_names(fixed_names: &[String], family: MixingFamily) -> Vec<String> {
    let mut names: Vec<String> = fixed_names.iter().map(|n| format!("beta.{n}")).collect();
    names.extend(
        [
            "beta0",
            "nu1",
            "nu2",
            "sigma2_e",
            "sigma2_T",
            "sigma2_cov",
            "omega1",
            "omega2",
            "lambda1",
            "lambda2",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    match family {
        MixingFamily::SkewNormal => {}
        MixingFamily::SkewT | MixingFamily::SkewSlash => names.push("nu".into()),
        MixingFamily::SkewContaminated => {
            names.push("gamma".into());
            names.push("lambda_c".into());
        }
    }
    names
}

/// Parameter values in the order of [`parameter_names`].
pub fn parameter_values(theta: &JointParams) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.extend([
        theta.beta0,
        theta.nu_event[0],
        theta.nu_event[1],
        theta.sigma2_e,
        theta.sigma2_t,
        theta.sigma2_cov,
        theta.omega1,
        theta.omega2,
        theta.lambda[0],
        theta.lambda[1],
    ]);
    match theta.mixing.family {
        MixingFamily::SkewNormal => {}
        MixingFamily::SkewT | MixingFamily::SkewSlash => v.push(theta.mixing.nu),
        MixingFamily::SkewContaminated => {
            v.push(theta.mixing.contam_weight);
            v.push(theta.mixing.contam_scale);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sni::MixingSpec;

    #[test]
    fn names_and_values_line_up() {
        let theta = JointParams {
            beta: vec![0.9, 1.0],
            beta0: 1.0,
            sigma2_e: 0.5,
            sigma2_t: 0.99,
            sigma2_cov: 0.3,
            omega1: 1.0,
            omega2: 0.5,
            lambda: [1.1, 1.2],
            nu_event: [0.8, 0.9],
            mixing: MixingSpec::skew_contaminated(0.1, 0.3),
        };
        let names = parameter_names(&["intercept".into(), "x".into()], MixingFamily::SkewContaminated);
        let values = parameter_values(&theta);
        assert_eq!(names.len(), values.len());
        assert_eq!(names[0], "beta.intercept");
        assert_eq!(names[names.len() - 1], "lambda_c");
        assert_eq!(values[names.iter().position(|n| n == "sigma2_T").unwrap()], 0.99);
        assert_eq!(values[names.iter().position(|n| n == "lambda2").unwrap()], 1.2);
    }
}
