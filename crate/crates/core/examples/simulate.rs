//! Draw a simulated panel of markets and inspect it.

use hdblp::dgp::{generate_dataset, DgpConfig};
use hdblp::io::write_dataset;

fn main() -> hdblp::Result<()> {
    let cfg = DgpConfig {
        markets: 100,
        seed: 3,
        ..Default::default()
    };
    let data = generate_dataset(&cfg)?;
    let truth = data.truth()?;
    let m = &data.markets[0];
    println!("{} markets, {} products, d_x = {}, d_z = {}", data.markets.len(), cfg.products, cfg.dim_x, cfg.dim_z);
    println!("market 0 prices  {:?}", m.p);
    println!("market 0 shares  {:?}", m.shares.as_slice());
    println!("market 0 xi      {:?}", truth.shocks[0].xi);
    let beta = truth.record.beta_vector();
    let nonzero = beta.iter().filter(|b| **b != 0.0).count();
    println!("beta has {nonzero} nonzero entries of {}", beta.len());

    if let Some(dir) = std::env::args().nth(1) {
        for path in write_dataset(&data, std::path::Path::new(&dir), "example")? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
