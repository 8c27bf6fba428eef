//! Evaluates a counting modal formula on a small degree graph, compiles it
//! into an integer message passing network and checks that the network's
//! output row agrees with the evaluator at every node.

use hcnet::hypergraph::{HyperEdge, Relation, RelationalHypergraph};
use hcnet::logic::{self, LogicSignature};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let names = ["hawking", "oxford", "physics", "ba", "cambridge", "phd", "penrose", "maths"];
    // StudyDegree(person, university, subject, degree)
    let facts = vec![
        HyperEdge::new(0, vec![0, 1, 2, 3]),
        HyperEdge::new(0, vec![0, 4, 2, 5]),
        HyperEdge::new(0, vec![6, 4, 7, 5]),
    ];
    let colors = vec![0, 1, 2, 3, 1, 3, 0, 2];
    let g = RelationalHypergraph::new(vec![Relation::new(0, "StudyDegree", 4)], facts, 8, Some(colors))?;
    let sig = LogicSignature::for_graph(
        &g,
        ["person", "university", "subject", "degree"].map(String::from).to_vec(),
    );

    let formula = logic::parse_formula(
        "(color(person) and exists>=2 StudyDegree@1 [3:color(subject), 4:color(degree)])",
    )?;
    println!("formula: {formula}");
    let truth = logic::eval_all(&g, &sig, &formula)?;
    let net = logic::compile_hgml_r(&formula, &sig)?;
    let rows = logic::run_compiled(&net, &g)?;
    println!("compiled into {} rows", net.dim());
    for (v, name) in names.iter().enumerate() {
        let out = rows[v][net.root()];
        assert_eq!(out == 1, truth[v]);
        println!("{name:>10}: {} (network {out})", truth[v]);
    }
    Ok(())
}
