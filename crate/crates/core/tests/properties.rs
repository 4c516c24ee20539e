mod common;

use proptest::prelude::*;

use branchsim::equivalence::Roi;
use branchsim::probe::fold_frames;
use branchsim::sim::{initial_dirty, step_incremental_counted};
use branchsim::store::SegmentRecord;
use branchsim::{
    branch_advice, branching_no_gain, digest_state, extract_frame, frame_deltas, init_state, partition_classes,
    step_full, step_incremental, trajectory_digest, Cells, Engine, NodeId, ObservationSpec, ParamSet, RunRequest,
    SimulatorSpec, StateDelta, Verdict,
};
use common::*;

fn vessel_case() -> impl Strategy<Value = (SimulatorSpec, ParamSet, Vec<(usize, f64)>)> {
    (4usize..14, 4usize..14).prop_flat_map(|(w, h)| {
        let n = w * h;
        (
            Just(SimulatorSpec::vesselgrid(w, h, 1.0).unwrap()),
            0.0f64..2.4,
            -4.0f64..4.0,
            -4.0f64..4.0,
            prop::collection::btree_set(0..n, 0..4),
            0.0f64..2.0,
            prop::collection::vec((0..n, -5.0f64..5.0), 0..6),
        )
            .prop_map(|(spec, d, vx, vy, sources, amp, seeds)| {
                let vy = vy.clamp(-(4.0 - vx.abs()), 4.0 - vx.abs());
                (spec, vessel(d, vx, vy, sources, amp), seeds)
            })
    })
}

fn maxca_case() -> impl Strategy<Value = (SimulatorSpec, Vec<(usize, f64)>)> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
        let n = w * h;
        (
            Just(SimulatorSpec::maxca(w, h).unwrap()),
            prop::collection::vec((0..n, (0u8..=255).prop_map(f64::from)), 0..5),
        )
    })
}

fn start(spec: &SimulatorSpec, pairs: &[(usize, f64)]) -> branchsim::FieldState {
    init_state(spec, &pairs.iter().copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn incremental_equals_full_vesselgrid((spec, params, seeds) in vessel_case(), steps in 1u64..40) {
        let mut full = start(&spec, &seeds);
        let mut inc = full.clone();
        let mut dirty = initial_dirty(&params, &inc);
        for _ in 0..steps {
            let next = step_full(&spec, &params, &full).unwrap();
            let changed = full.cells.diff_indices(&next.cells);
            full = next;
            let (s, d) = step_incremental(&spec, &params, &inc, &dirty).unwrap();
            prop_assert_eq!(s.cells.to_bytes(), full.cells.to_bytes());
            prop_assert_eq!(d.indices(), changed.as_slice());
            inc = s;
            dirty = d;
        }
    }

    #[test]
    fn incremental_equals_full_maxca((spec, seeds) in maxca_case(), steps in 1u64..30) {
        let mut full = start(&spec, &seeds);
        let mut inc = full.clone();
        let mut dirty = initial_dirty(&ParamSet::Maxca, &inc);
        for _ in 0..steps {
            full = step_full(&spec, &ParamSet::Maxca, &full).unwrap();
            let (s, d, recomputed) = step_incremental_counted(&spec, &ParamSet::Maxca, &inc, &dirty).unwrap();
            prop_assert!(recomputed <= spec.cell_count());
            prop_assert_eq!(&s.cells, &full.cells);
            inc = s;
            dirty = d;
        }
    }

    #[test]
    fn stepping_is_deterministic((spec, params, seeds) in vessel_case()) {
        let a = step_full(&spec, &params, &start(&spec, &seeds)).unwrap();
        let b = step_full(&spec, &params, &start(&spec, &seeds)).unwrap();
        prop_assert_eq!(digest_state(&spec, &a), digest_state(&spec, &b));
    }

    #[test]
    fn diffusion_conserves_mass(w in 3usize..16, h in 3usize..16, d in 0.0f64..2.5, seeds in prop::collection::vec((0usize..9, 0.0f64..10.0), 1..6)) {
        let spec = SimulatorSpec::vesselgrid(w, h, 1.0).unwrap();
        let params = vessel(d, 0.0, 0.0, [], 0.0);
        let mut s = start(&spec, &seeds);
        let total = |s: &branchsim::FieldState| s.cells.values().iter().sum::<f64>();
        let m0 = total(&s);
        for _ in 0..25 {
            s = step_full(&spec, &params, &s).unwrap();
        }
        prop_assert!((total(&s) - m0).abs() <= 1e-12 * m0.abs().max(1.0));
    }

    #[test]
    fn maxca_is_monotone_and_saturates((spec, seeds) in maxca_case()) {
        let mut s = start(&spec, &seeds);
        let peak = s.cells.values().into_iter().fold(0.0, f64::max);
        let bound = 2 * (spec.width.max(spec.height) - 1);
        for _ in 0..bound {
            let next = step_full(&spec, &ParamSet::Maxca, &s).unwrap();
            for i in 0..spec.cell_count() {
                prop_assert!(next.cells.value(i) >= s.cells.value(i));
            }
            s = next;
        }
        prop_assert!(s.cells.values().iter().all(|&v| v == peak));
    }

    #[test]
    fn deltas_are_minimal_and_exact((spec, params, seeds) in vessel_case()) {
        let a = start(&spec, &seeds);
        let b = step_full(&spec, &params, &a).unwrap();
        let delta = StateDelta::between(&a.cells, &b.cells, 1);
        for &(i, _) in &delta.entries {
            prop_assert_ne!(a.cells.bits(i as usize), b.cells.bits(i as usize));
        }
        prop_assert_eq!(delta.entries.len(), a.cells.diff_indices(&b.cells).len());
        let mut c = a.cells.clone();
        delta.apply(&mut c);
        prop_assert_eq!(c.to_bytes(), b.cells.to_bytes());
    }

    #[test]
    fn segment_round_trip((spec, params, seeds) in vessel_case(), steps in 0u64..35, interval in 1u64..12) {
        let mut s = start(&spec, &seeds);
        let mut seg = SegmentRecord::new(&spec, NodeId(3), &s, interval);
        let mut all = vec![s.clone()];
        for _ in 0..steps {
            let next = step_full(&spec, &params, &s).unwrap();
            seg.append_step(&s, &next).unwrap();
            s = next;
            all.push(s.clone());
        }
        let back = SegmentRecord::decode(&spec, &seg.encode()).unwrap();
        for (t, expected) in all.iter().enumerate() {
            prop_assert_eq!(back.get_state_at(t as u64).unwrap().cells.to_bytes(), expected.cells.to_bytes());
        }
    }

    #[test]
    fn class_predicates_are_consistent(p in 1usize..50, s in 1usize..50) {
        let advice = branch_advice(p, s).unwrap();
        prop_assert_eq!(branching_no_gain(p, s).unwrap(), advice.verdict == Verdict::NoGain);
    }

    #[test]
    fn zero_counts_are_rejected(n in 0usize..5) {
        prop_assert!(branch_advice(0, n).is_err());
        prop_assert!(branching_no_gain(n, 0).is_err());
    }
}

/// Several short trajectories on one engine, all observed over `(0, 12)`.
fn trajectory_family(diffusions: &[f64], amps: &[f64]) -> (Engine, Vec<NodeId>) {
    let spec = SimulatorSpec::vesselgrid(12, 12, 1.0).unwrap();
    let engine = Engine::in_memory(5);
    let mut ids = Vec::new();
    for (&d, &a) in diffusions.iter().zip(amps) {
        let s = start(&spec, &[(12 * 2 + 2, 1.0)]);
        let id = engine.create_root(&spec, vessel(d, 0.0, 0.0, block(&spec, 8, 8, 2), a), &s).unwrap();
        engine.run(RunRequest { node: id, until_step: 12, incremental: true }).unwrap();
        ids.push(id);
    }
    (engine, ids)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn equivalence_is_an_equivalence(choices in prop::collection::vec((0usize..2, 0usize..2), 3)) {
        let ds: Vec<f64> = choices.iter().map(|c| [0.3, 0.6][c.0]).collect();
        let amps: Vec<f64> = choices.iter().map(|c| [0.5, 1.5][c.1]).collect();
        let (engine, ids) = trajectory_family(&ds, &amps);
        let obs = [ObservationSpec::full_state(), ObservationSpec::region(Roi { x: 0, y: 0, width: 4, height: 4 })];
        for o in &obs {
            let dig: Vec<_> = ids.iter().map(|&id| trajectory_digest(&engine, id, (0, 12), o).unwrap().combined).collect();
            let eq = |i: usize, j: usize| dig[i] == dig[j];
            for i in 0..3 {
                prop_assert!(eq(i, i));
                for j in 0..3 {
                    prop_assert_eq!(eq(i, j), eq(j, i));
                    for k in 0..3 {
                        prop_assert!(!(eq(i, j) && eq(j, k)) || eq(i, k));
                    }
                }
            }
            let classes = partition_classes(&engine, &ids, (0, 12), o).unwrap();
            let members: usize = classes.iter().map(|c| c.members.len()).sum();
            prop_assert_eq!(members, 3);
        }
        for i in 0..3 {
            for j in 0..3 {
                let full_eq = trajectory_digest(&engine, ids[i], (0, 12), &obs[0]).unwrap().combined
                    == trajectory_digest(&engine, ids[j], (0, 12), &obs[0]).unwrap().combined;
                let roi_eq = trajectory_digest(&engine, ids[i], (0, 12), &obs[1]).unwrap().combined
                    == trajectory_digest(&engine, ids[j], (0, 12), &obs[1]).unwrap().combined;
                prop_assert!(!full_eq || roi_eq);
            }
        }
    }

    #[test]
    fn frame_deltas_fold_to_frames(from in 0u64..20, len in 1u64..20, d in 0.1f64..1.0) {
        let (engine, ids) = trajectory_family(&[d], &[1.0]);
        engine.run(RunRequest { node: ids[0], until_step: 40, incremental: true }).unwrap();
        let deltas = frame_deltas(&engine, ids[0], from, from + len).unwrap();
        for f in fold_frames(extract_frame(&engine, ids[0], from).unwrap(), &deltas) {
            prop_assert_eq!(f.cells, extract_frame(&engine, ids[0], f.step).unwrap().cells);
        }
    }
}

#[test]
fn maxca_cells_stay_bytes() {
    let spec = SimulatorSpec::maxca(3, 3).unwrap();
    let s = step_full(&spec, &ParamSet::Maxca, &start(&spec, &[(4, 9.0)])).unwrap();
    assert_eq!(s.cells, Cells::Byte(vec![0, 9, 0, 9, 9, 9, 0, 9, 0]));
}
