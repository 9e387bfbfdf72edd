//! Positive projection of a target gradient onto source directions, flat and per layer.

use std::error::Error;

use fda_core::aggregate::{aggregate, proj_plus, proj_plus_layerwise, AggregationRule};
use fda_core::linalg::{inner, ParamVector};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let g_t = ParamVector::new(vec![vec![1.0, 2.0], vec![0.5, -1.0, 3.0]])?;
    let aligned = ParamVector::new(vec![vec![2.0, 1.0], vec![1.0, 0.0, 1.0]])?;
    let opposed = aligned.scale(-1.0);

    let p = proj_plus(&g_t, &aligned)?;
    println!("proj onto aligned source : {:?}", p.layers());
    println!(
        "  <proj, g_S> = {:.4}, |proj| = {:.4} <= |g_T| = {:.4}",
        inner(&p, &aligned)?,
        p.norm(),
        g_t.norm()
    );
    println!("proj onto opposed source : {:?}", proj_plus(&g_t, &opposed)?.layers());

    // The second layer of `mixed` points against g_T, so the layerwise rule drops it.
    let mixed = ParamVector::new(vec![vec![1.0, 1.0], vec![-1.0, 0.0, -1.0]])?;
    println!("flat projection          : {:?}", proj_plus(&g_t, &mixed)?.layers());
    println!(
        "layerwise projection     : {:?}",
        proj_plus_layerwise(&g_t, &mixed)?.layers()
    );

    let sources = [aligned, opposed];
    let sizes = [100, 100];
    for rule in [AggregationRule::fed_da(0.5), AggregationRule::fed_gp(0.5)] {
        let out = aggregate(&rule, &sources, &sizes, &g_t, &[0.5, 0.5])?;
        println!("{:<12} -> {:?}", rule.label(), out.layers());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
