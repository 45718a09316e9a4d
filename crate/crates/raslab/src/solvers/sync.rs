//! Synchronous reference sweeps.
//!
//! Every rank updates, exchanges exact data, and recomputes its residual in
//! lockstep. After each sweep both drivers refresh every non-owned overlap
//! slot from its owner alongside the ring halo, so each local residual is an
//! exact restriction of the global residual: the summed owned energies give
//! the exact residual norm, and the two-level coarse right-hand side is the
//! exact aggregated residual.

use crate::problem::{build_coarse, CoarseOperator, ProblemError, ProblemSet};
use crate::sparse::norm2;

use super::kernels;
use super::{assemble_global, relative_residual, CoarseRound, RunReport, SolverConfig, Variant};

/// Runs synchronous one-level sweeps.
pub fn run_sync_ras(ps: &ProblemSet, cfg: &SolverConfig) -> RunReport {
    run_sync(ps, cfg, None)
}

/// Runs synchronous two-level sweeps: each sweep blends the subdomain
/// corrections with a coarse correction solved from the current residual.
pub fn run_sync_two_level(ps: &ProblemSet, cfg: &SolverConfig) -> Result<RunReport, ProblemError> {
    let coarse = build_coarse(&ps.a, &ps.dec.owner, ps.p())?;
    Ok(run_sync(ps, cfg, Some(&coarse)))
}

fn run_sync(ps: &ProblemSet, cfg: &SolverConfig, coarse: Option<&CoarseOperator>) -> RunReport {
    let p = ps.p();
    let subs = &ps.subdomains;
    let norm_b = norm2(&ps.b);
    let threshold = (cfg.eps * norm_b) * (cfg.eps * norm_b);

    let mut x: Vec<Vec<f64>> = subs.iter().map(|s| vec![0.0; s.n_local()]).collect();
    let mut halo: Vec<Vec<f64>> = subs.iter().map(|s| vec![0.0; s.n_halo()]).collect();
    let mut r: Vec<Vec<f64>> = subs.iter().map(|s| s.b_local.clone()).collect();
    let coarse_slots: Vec<Vec<usize>> = if coarse.is_some() {
        (0..p).map(|i| kernels::coarse_slot_map(ps, i)).collect()
    } else {
        Vec::new()
    };

    let mut k_rounds: u64 = 0;
    let mut exited_via_norm = false;
    let mut coarse_solves: u64 = 0;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);
    let mut coarse_rounds = (cfg.record_snapshots && coarse.is_some()).then(Vec::new);

    loop {
        // Coarse correction from the residuals the sweep starts with (the
        // first sweep starts from r = b).
        let x0 = coarse.map(|co| {
            let r0: Vec<f64> = (0..p).map(|i| subs[i].owned_sum(&r[i])).collect();
            let sol = co.solve(&r0);
            coarse_solves += 1;
            if let Some(rounds) = coarse_rounds.as_mut() {
                rounds.push(CoarseRound { r0, x0: sol.clone() });
            }
            sol
        });

        for i in 0..p {
            match &x0 {
                Some(x0) => kernels::corrected_update(
                    &mut x[i],
                    &ps.factors[i],
                    &r[i],
                    x0,
                    &coarse_slots[i],
                    cfg.blend,
                ),
                None => kernels::plain_update(&mut x[i], &ps.factors[i], &r[i]),
            }
        }
        if let Some(traj) = trajectory.as_mut() {
            traj.push(assemble_global(ps, &x));
        }

        // Overlap-consistency refresh: every non-owned slot takes its
        // owner's current value. The incremental update wipes the local
        // iterate anyway, so this never changes the owned trajectory; it
        // makes the recomputed residuals exact.
        let mut staged: Vec<Vec<f64>> = Vec::with_capacity(p);
        for i in 0..p {
            let mut incoming = Vec::new();
            for sb in &subs[i].sync_blocks {
                for s in reciprocal(ps, sb.neighbor, i, true) {
                    incoming.push(x[sb.neighbor][s]);
                }
            }
            staged.push(incoming);
        }
        for (i, incoming) in staged.iter().enumerate() {
            let slots = subs[i].sync_blocks.iter().flat_map(|sb| sb.recv_slots.iter());
            for (&slot, &v) in slots.zip(incoming) {
                x[i][slot] = v;
            }
        }

        // Halo refresh: ring values straight from the owners' iterates.
        for i in 0..p {
            for hb in &subs[i].halo_blocks {
                let senders = reciprocal(ps, hb.neighbor, i, false);
                debug_assert_eq!(senders.len(), hb.recv_len);
                for (t, s) in senders.into_iter().enumerate() {
                    halo[i][hb.recv_offset + t] = x[hb.neighbor][s];
                }
            }
        }

        for i in 0..p {
            kernels::residual_into(&subs[i], &x[i], &halo[i], &mut r[i]);
        }

        k_rounds += 1;
        let sum: f64 = (0..p).map(|i| subs[i].owned_energy(&r[i])).sum();
        if !sum.is_finite() {
            break;
        }
        if sum < threshold {
            exited_via_norm = true;
            break;
        }
        if k_rounds >= cfg.k_max {
            break;
        }
    }

    let xg = assemble_global(ps, &x);
    let final_relres = relative_residual(&ps.a, &ps.b, &xg);
    let two_level = coarse.is_some();
    RunReport {
        variant: if two_level { Variant::SyncTwoLevel } else { Variant::SyncOneLevel },
        p,
        converged: exited_via_norm && final_relres < cfg.eps,
        exited_via_norm,
        k_rounds,
        k_local: vec![k_rounds; p],
        corrections: vec![if two_level { k_rounds } else { 0 }; p],
        versions: vec![if two_level { k_rounds } else { 0 }; p],
        per_version_corrections: vec![vec![1; if two_level { k_rounds as usize } else { 0 }]; p],
        coarse_solves,
        final_relres,
        x: xg,
        ticks: 0,
        trajectory,
        snapshots: None,
        coarse_rounds,
        trace: None,
    }
}

/// Send slots of the exchange block `from -> to`; the sorted global exchange
/// lists make them line up elementwise with the receiver's slots.
fn reciprocal(ps: &ProblemSet, from: usize, to: usize, sync: bool) -> Vec<usize> {
    let sub = &ps.subdomains[from];
    if sync {
        sub.sync_blocks
            .iter()
            .find(|sb| sb.neighbor == to)
            .map(|sb| sb.send_slots.clone())
            .expect("missing reciprocal overlap block")
    } else {
        sub.halo_blocks
            .iter()
            .find(|hb| hb.neighbor == to)
            .map(|hb| hb.send_slots.clone())
            .expect("missing reciprocal halo block")
    }
}
