//! Exact myopic QSE by dynamic programming, checked against enumeration.
use quantal::harness::offline_benchmark;
use quantal::oracle::brute_force_qse;
use quantal::planner::{evaluate_j, solve_qse_myopic, PrescriptionGrid};
use quantal::game::LeaderPolicy;

fn main() -> quantal::Result<()> {
    let game = offline_benchmark();
    let dims = game.dims();
    println!("uniform leader: J = {:.6}", evaluate_j(&game, &LeaderPolicy::uniform(dims))?);
    for mesh in [0, 2, 4, 10] {
        let grid = PrescriptionGrid::for_dims(dims, mesh)?;
        let (policy, j) = solve_qse_myopic(&game, &grid)?;
        print!("mesh {mesh:>2} ({:>4} prescriptions): J* = {j:.6}", grid.len());
        if mesh <= 2 {
            let (_, j_bf) = brute_force_qse(&game, &grid)?;
            print!("  enumeration {j_bf:.6}");
        }
        println!();
        if mesh == 10 {
            for h in 0..dims.horizon {
                for s in 0..dims.states {
                    println!("  h={h} s={s} prescription (rows b, cols a) {:.2?}", policy.prescription(h, s));
                }
            }
        }
    }
    Ok(())
}
