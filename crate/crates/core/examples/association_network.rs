//! Residual species associations: posterior latent covariance pushed
//! through the loadings, sparsified by the graphical lasso.
//!
//! ```text
//! cargo run --release --example association_network
//! ```

mod common;

use mtec::assoc::{
    association_network, posterior_stats, residual_covariance, select_lambda, GlassoOptions,
};

fn main() -> mtec::Result<()> {
    let toy = common::fit_toy()?;
    let d = &toy.data;
    let opts = GlassoOptions::default();

    let net = association_network(&toy.model, &d.community, &d.species_names, 0.05, &opts)?;
    let s = net.summary();
    println!(
        "lambda {}: {} edges, density {:.2}, {} components",
        s.lambda, s.n_edges, s.density, s.components
    );
    for e in &net.edges {
        println!(
            "  {:<8} {:<8} {:+.3}",
            d.species_names[e.i], d.species_names[e.j], e.partial_correlation
        );
    }

    let stats = posterior_stats(&toy.model, &d.community)?;
    let sigma_r = residual_covariance(&stats.sigma_hat, &toy.model.loadings)?;
    let grid = [0.01, 0.02, 0.05, 0.1, 0.2];
    let (chosen, fit) = select_lambda(&sigma_r, &grid, d.n_sites(), &opts)?;
    println!(
        "\nextended BIC over {grid:?} picks lambda {chosen} (converged: {})",
        fit.converged
    );
    Ok(())
}
