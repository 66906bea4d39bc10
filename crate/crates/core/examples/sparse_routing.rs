//! Tokens Choice and Experts Choice on the same scores, then a small
//! dropping sweep over expert counts.

use softmoe::sparse::{dropping_sweep, random_scores, RouterFamily, SparseRouter, SweepGrid};
use softmoe::Rng;

fn main() -> softmoe::Result<()> {
    let scores = random_scores(&mut Rng::new(3), 64, 8, 1.0)?;
    let routers = [
        SparseRouter::TokensChoice { k: 1, capacity_factor: 1.0, bpr: false },
        SparseRouter::TokensChoice { k: 1, capacity_factor: 1.0, bpr: true },
        SparseRouter::TokensChoice { k: 2, capacity_factor: 1.25, bpr: true },
        SparseRouter::ExpertsChoice { capacity_factor: 1.0 },
    ];
    for r in routers {
        let a = r.route(&scores)?;
        let s = a.stats();
        println!(
            "{:?}\n  capacity {}  dropped {:.3}  multi-selected {:.3}  dropped gate mass {:.3}  loads {:?}",
            r,
            a.capacity,
            s.drop_rate,
            s.multi_select_rate,
            a.dropped_gate_mass(&scores),
            s.per_expert_load
        );
    }

    let grid = SweepGrid {
        routers: vec![RouterFamily::TokensChoice, RouterFamily::ExpertsChoice],
        bpr: vec![true],
        samples: 20,
        ..SweepGrid::default()
    };
    println!("\nrouter          E    c      drop");
    for row in dropping_sweep(&grid, &Rng::new(0), 4)? {
        println!("{:<15} {:<4} {:<6} {:.4}", row.router, row.experts, row.capacity_factor, row.drop_rate);
    }
    Ok(())
}
