//! Single-thread forward+backward time of one layer against expert count.
//!
//!     cargo run --release --example throughput

use softmoe::analysis::{throughput_bench, BenchGrid};
use softmoe::Rng;

fn main() -> softmoe::Result<()> {
    let grid = BenchGrid::default();
    let rows = throughput_bench(&grid, &Rng::new(0))?;
    println!("{}×{} tokens, d={}, soft n·p={}", grid.sequences, grid.tokens, grid.d, grid.total_slots);
    for r in rows {
        println!("{:<14} E={:<4} median {:>8.3} ms  min {:>8.3} ms", r.router.name(), r.experts, r.median_ms, r.min_ms);
    }
    Ok(())
}
