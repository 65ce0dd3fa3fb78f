mod common;

use proptest::prelude::*;

use secfuse::analysis;
use secfuse::design::{self, NormKind, StabilizeOptions};
use secfuse::matrix::{Matrix, Vector};
use secfuse::protocol::{MessageLog, Mode, Session};
use secfuse::sim::PartyModel;

use common::checks;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn lmi_membership_implies_stability(
        seed in any::<u64>(),
        n in 1usize..5,
        count in 1usize..4,
        contraction in prop_oneof![0.2f64..0.95, 1.05f64..1.5],
    ) {
        prop_assume!(checks::lmi_membership(seed, n, count, contraction).map_err(TestCaseError::fail)?);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rate_prescription_is_a_rescaled_design(seed in any::<u64>(), epsilon in 0.5f64..1.0) {
        checks::rate_prescription(seed, epsilon).map_err(TestCaseError::fail)?;
    }

    /// An accepted design always passes an independent stability re-check.
    #[test]
    fn accepted_designs_are_stable(seed in any::<u64>(), n in 1usize..4, count in 1usize..4) {
        let mut rng = common::rng(seed);
        let a = common::with_norm(&mut rng, n, n, 1.1);
        let parties = checks::random_parties(&mut rng, n, count);
        let ids: Vec<usize> = parties.iter().map(PartyModel::id).collect();
        let mut session = Session::new(&Mode::Plaintext, &ids, MessageLog::disabled()).unwrap();
        let relaxed = design::stabilization_method_1(&parties, &a, NormKind::Spectral, &mut session).unwrap();
        let options = StabilizeOptions { iterations: 40, ..StabilizeOptions::default() };
        let (admm, _) = design::stabilization_method_2(&parties, &a, &options).unwrap();
        for result in [relaxed, admm] {
            if result.accepted {
                let closed = parties
                    .iter()
                    .zip(&result.gains)
                    .fold(a.clone(), |acc, (p, k)| acc - k * p.c() * &a / count as f64);
                let rho = closed.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
                prop_assert!(rho < 1.0 + 1e-12, "accepted with rho = {rho}");
            }
        }
    }
}

#[test]
fn design_messages_carry_only_the_named_products() {
    checks::design_privacy().unwrap();
}

#[test]
fn stacked_observations_match_a_hand_built_model() {
    let (system, parties) = common::example_system();
    let c = Matrix::from_fn(5, 5, |i, j| {
        let (p, row) = match i {
            0 => (0, 0),
            1 => (1, 0),
            2 => (2, 0),
            3 => (2, 1),
            _ => (3, 0),
        };
        parties[p].c()[(row, j)]
    });
    let r = Matrix::from_diagonal(&Vector::from_vec(vec![0.10, 0.08, 0.09, 0.09, 0.06]));
    let (stacked_c, stacked_r) = analysis::stack_observations(&parties).unwrap();
    assert_eq!(stacked_c, c);
    assert_eq!(stacked_r, r);
    let sol = analysis::dare_solve(system.a(), &c, system.q(), &r, 1e-12).unwrap();
    assert!(sol.residual <= 1e-10);
}
