//! Market shares under a random price coefficient, their inversion, and the
//! derivatives used by the estimators.

use hdblp::shares::*;

fn main() -> hdblp::Result<()> {
    let quad = QuadratureRule::default();
    let opts = InversionOptions::default();
    let y = vec![0.5, -0.2, 1.1, 0.0];
    let p = vec![1.2, 0.8, 2.0, 1.5];
    let sigma = 1.0;

    let s = compute_shares(&y, &p, sigma, &quad)?;
    println!("shares          {:?}", s.as_slice());
    println!("outside share   {:.6}", 1.0 - s.as_slice().iter().sum::<f64>());

    let inv = invert_shares(&s, &p, sigma, &quad, &opts)?;
    println!("recovered y     {:?}", inv.y.as_slice());

    let jac = share_jacobian_y(&y, &p, sigma, &quad)?;
    println!("ds/dy\n{jac:.5}");

    let dy = dy_dsigma(&s, &p, sigma, &quad, &opts)?;
    println!("dy/dsigma       {:?}", dy.as_slice());

    // Without heterogeneity the inversion is the closed-form log ratio.
    let inv0 = invert_shares(&s, &p, 0.0, &quad, &opts)?;
    let s0 = 1.0 - s.as_slice().iter().sum::<f64>();
    let closed: Vec<f64> = s.as_slice().iter().map(|v| (v / s0).ln()).collect();
    println!("sigma=0 y       {:?}", inv0.y.as_slice());
    println!("log(s_j / s_0)  {closed:?}");
    Ok(())
}
