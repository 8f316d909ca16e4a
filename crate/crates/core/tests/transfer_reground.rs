use std::sync::Arc;

use jodp::base_space::{build_gridworld, BaseSpace, GridBuilder, LEFT};
use jodp::ensemble::{build_complete_ensemble, PolicyEnsemble};
use jodp::feasibility::Grounding;
use jodp::instrument;
use jodp::og_task::{OgTask, TaskState};
use jodp::tlmdp::{extract_task_policy, solve_gs, PolicyCost, TlmdpProblem};
use jodp::transfer::{check_gie, reground, zero_shot_apply, GieKind, ShortestPathMatrix, DEFAULT_GIE_TOLERANCE};
use jodp::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn complete(space: BaseSpace) -> (Arc<BaseSpace>, PolicyEnsemble) {
    let space = Arc::new(space);
    let e = build_complete_ensemble(&space, 10.0, 1e-12).unwrap();
    (space, e)
}

/// Task state with goal `i` set whenever goal `perm[i]` is set in `sigma`.
fn relabel(sigma: TaskState, perm: &[usize]) -> TaskState {
    let mut out = TaskState(0);
    for (i, &p) in perm.iter().enumerate() {
        if sigma.has(p) {
            out = out.with(i);
        }
    }
    out
}

#[test]
fn identity_regrounding_is_bitwise_identical() {
    let (space, e) = complete(build_gridworld(5, 4, &[(1, 2)]).unwrap());
    let task = OgTask::unordered(3, 1.0).unwrap();
    let g = Grounding::at_states(&space, &[2, 9, 17]).unwrap();
    let p1 = TlmdpProblem::new(&e, &task, g.clone()).unwrap();
    let p2 = reground(&p1, g).unwrap();
    let (s1, s2) = (solve_gs(&p1, 1e-12).unwrap(), solve_gs(&p2, 1e-12).unwrap());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&s1.log_z), bits(&s2.log_z));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_goals_permutes_the_solution(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (space, e) = complete(build_gridworld(5, 5, &[(2, 2)]).unwrap());
        let free: Vec<usize> = (0..25).filter(|&s| s != 12).collect();
        let states: Vec<usize> = free.choose_multiple(&mut rng, n).copied().collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let task = OgTask::unordered(n, 1.0).unwrap();
        let g = Grounding::at_states(&space, &states).unwrap();
        let p1 = TlmdpProblem::new(&e, &task, g.clone()).unwrap();
        let p2 = reground(&p1, g.permuted(&perm)).unwrap();
        let (s1, s2) = (solve_gs(&p1, 1e-13).unwrap(), solve_gs(&p2, 1e-13).unwrap());
        for i in 0..s2.layout.dim() {
            let (sigma, l, pi) = s2.layout.decode(i);
            let mut inverse_sigma = TaskState(0);
            for g2 in 0..n {
                if sigma.has(g2) {
                    inverse_sigma = inverse_sigma.with(perm[g2]);
                }
            }
            prop_assert_eq!(relabel(inverse_sigma, &perm), sigma);
            let a = s2.log_z[i];
            let b = s1.log_z_at(inverse_sigma, perm[l], perm[pi]);
            prop_assert!(a == b || (a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}

#[test]
fn mirrored_grounding_transfers_without_solving() {
    let (space, e) = complete(build_gridworld(7, 5, &[(3, 1), (3, 3)]).unwrap());
    let task = OgTask::unordered(3, 1.0).unwrap();
    let cells = [(0, 0), (2, 4), (5, 2)];
    let at = |m: bool| -> Vec<usize> {
        cells
            .iter()
            .map(|&(x, y)| space.cell(if m { 6 - x } else { x }, y).unwrap())
            .collect()
    };
    let p1 = TlmdpProblem::new(&e, &task, Grounding::at_states(&space, &at(false)).unwrap()).unwrap();
    let p2 = reground(&p1, Grounding::at_states(&space, &at(true)).unwrap()).unwrap();
    let v = check_gie(&p1, &p2, DEFAULT_GIE_TOLERANCE).unwrap();
    let GieKind::TcGie { gamma } = v.kind else { panic!("{:?}", v.kind) };
    assert!((gamma - 1.0).abs() < 1e-9);
    let s = ShortestPathMatrix::from_problem(&p1);
    assert!((0..3).all(|i| s.get(i, i) == 0.0));

    let s1 = solve_gs(&p1, 1e-12).unwrap();
    let before = instrument::snapshot();
    let moved = zero_shot_apply(&s1, &p2, &v).unwrap();
    assert_eq!(instrument::snapshot() - before, Default::default());
    assert_eq!(moved.iterations, 0);

    let direct = solve_gs(&p2, 1e-12).unwrap();
    let (u1, u2) = (extract_task_policy(&moved, &p2), extract_task_policy(&direct, &p2));
    for s in 0..8u32 {
        for l in 0..3 {
            assert_eq!(u1.greedy(TaskState(s), l), u2.greedy(TaskState(s), l));
        }
    }
}

#[test]
fn feasibility_mismatch_refuses_transfer() {
    let open = Arc::new(build_gridworld(4, 1, &[]).unwrap());
    let cliff = Arc::new(GridBuilder::new(4, 1).block_move((2, 0), LEFT).build().unwrap());
    let e1 = build_complete_ensemble(&open, 10.0, 1e-12).unwrap();
    let e2 = build_complete_ensemble(&cliff, 10.0, 1e-12).unwrap();
    let task = OgTask::unordered(3, 1.0).unwrap();
    let p1 = TlmdpProblem::new(&e1, &task, Grounding::at_states(&open, &[0, 1, 3]).unwrap()).unwrap();
    let p2 = TlmdpProblem::new(&e2, &task, Grounding::at_states(&cliff, &[0, 1, 3]).unwrap()).unwrap();
    let v = check_gie(&p1, &p2, DEFAULT_GIE_TOLERANCE).unwrap();
    assert!(!v.k_equal);
    assert_eq!(v.kind, GieKind::None);
    let s1 = solve_gs(&p1, 1e-12).unwrap();
    assert!(matches!(zero_shot_apply(&s1, &p2, &v), Err(Error::TransferRefused(_))));
}

#[test]
fn topological_transfer_needs_the_cost_free_system() {
    let (space, e) = complete(build_gridworld(6, 6, &[]).unwrap());
    let task = OgTask::unordered(3, 1.0).unwrap();
    let p1 = TlmdpProblem::new(&e, &task, Grounding::at_states(&space, &[0, 8, 35]).unwrap()).unwrap();
    let p2 = reground(&p1, Grounding::at_states(&space, &[3, 20, 31]).unwrap()).unwrap();
    let v = check_gie(&p1, &p2, DEFAULT_GIE_TOLERANCE).unwrap();
    assert_eq!(v.kind, GieKind::TGie);
    let s1 = solve_gs(&p1, 1e-12).unwrap();
    assert!(matches!(zero_shot_apply(&s1, &p2, &v), Err(Error::TransferRefused(_))));

    let q1 = p1.clone().with_policy_cost(PolicyCost::Identity);
    let q2 = p2.clone().with_policy_cost(PolicyCost::Identity);
    let s1 = solve_gs(&q1, 1e-12).unwrap();
    let moved = zero_shot_apply(&s1, &q2, &v).unwrap();
    let direct = solve_gs(&q2, 1e-12).unwrap();
    for (a, b) in moved.log_z.iter().zip(&direct.log_z) {
        assert!(a == b || (a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
