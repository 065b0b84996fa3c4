//! Differentiating through a gradient.
//!
//! `f(x) = || d/dW (W x)^2 ||^2` at `W = 2`, `x = 3`. The inner gradient is
//! `2 W x^2 = 36`, and `df/dx = 2 * 36 * 4 W x = 1728`. The first `backward`
//! keeps its graph (`create_graph = true`) so the second one can walk through it.
//!
//! ```text
//! cargo run --release -p gradleak --example double_backward
//! ```

use gradleak::autodiff::Graph;

fn main() -> gradleak::Result<()> {
    let mut g = Graph::new();
    let w = g.leaf(&[1, 1], vec![2.0], true)?;
    let x = g.leaf(&[1, 1], vec![3.0], true)?;
    let wx = g.matmul(w, x)?;
    let sq = g.square(wx)?;
    let loss = g.sum(sq)?;

    let dw = g.backward(loss, &[w], true)?[0];
    println!("dL/dW        = {:?}", g.values(dw));

    let dw2 = g.square(dw)?;
    let f = g.sum(dw2)?;
    let dx = g.backward(f, &[x], false)?[0];
    println!("d|dL/dW|^2/dx = {:?}", g.values(dx));
    Ok(())
}
