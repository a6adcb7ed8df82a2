//! Follower quantal response to a leader policy, myopic and farsighted.
use quantal::game::{make_random_game, Dims, LeaderPolicy};
use quantal::response::{dist_metrics, quantal_response};

fn main() -> quantal::Result<()> {
    let dims = Dims::new(2, 2, 3, 3);
    let policy = LeaderPolicy::uniform(dims);
    for gamma in [0.0, 0.9, 1.0] {
        let game = make_random_game(dims, gamma, 2.0, None, 7)?;
        let sol = quantal_response(&game, &policy)?;
        println!("gamma = {gamma}: B_A = {:.3}, invariant residual {:.1e}", sol.advantage_bound(), sol.invariant_violation());
        for h in 0..dims.horizon {
            println!("  h={h} s=0  nu = {:.3?}  A = {:.3?}", sol.nu_row(h, 0), sol.adv_row(h, 0));
        }
    }

    // a sharper follower concentrates on the best reply
    let myopic = make_random_game(dims, 0.0, 1.0, None, 7)?;
    let sharp = myopic.with_rationality(20.0)?;
    let (a, b) = (quantal_response(&myopic, &policy)?, quantal_response(&sharp, &policy)?);
    let m = dist_metrics(a.nu_row(0, 0), b.nu_row(0, 0))?;
    println!("eta 1 vs 20 at (0, 0): tv {:.3}, hellinger^2 {:.3}, kl {:.3}", m.tv, m.hellinger_sq(), m.kl.unwrap_or(f64::INFINITY));
    Ok(())
}
