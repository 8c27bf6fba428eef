//! Colour refinement on HyperCycle(8, 3). Plain refinement gives every node
//! the same colour, so the opposite point `x4` and the two-hop node `x2` look
//! alike. Conditioning on the query `r0(x0, ?)` separates them.

use hcnet::hypergraph::Query;
use hcnet::refine::{self, NodeColoring, Rounds};
use hcnet::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = synth::hypercycle(8, 3)?;
    let plain = refine::hrwl1_run(&g, NodeColoring::uniform(8), Rounds::UntilStable)?;
    let last = plain.last().expect("at least the initial round");
    println!("hrwl1 stable after {} rounds: {:?}", last.round, last.colors);

    let q = Query::new(synth::QUERY_RELATION, vec![0], 2);
    let cond = refine::conditional_run(&g, &q, Rounds::Fixed(4))?;
    for c in &cond {
        println!("conditioned round {}: {:?}", c.round, c.colors);
    }
    let last = cond.last().expect("rounds were run");
    println!(
        "x4 and x2 {} after conditioning",
        if last.colors[4] == last.colors[2] { "coincide" } else { "differ" }
    );
    Ok(())
}
