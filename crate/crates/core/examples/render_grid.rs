//! Writes a comparison grid and reads it back.
//!
//! ```text
//! cargo run --release -p gradleak --example render_grid
//! ```

use gradleak::experiment::{encode_grid, parse_ppm, render_grid};

fn main() -> gradleak::Result<()> {
    let disc = |r: f64| -> Vec<f64> {
        (0..28 * 28)
            .map(|i| {
                let (y, x) = ((i / 28) as f64 - 13.5, (i % 28) as f64 - 13.5);
                f64::from(u8::from(x * x + y * y < r * r))
            })
            .collect()
    };
    let originals = vec![disc(6.0), disc(9.0), disc(12.0)];
    let blurred: Vec<Vec<f64>> = originals.iter().map(|o| o.iter().map(|v| 0.2 + 0.6 * v).collect()).collect();

    render_grid(&originals, &blurred, [1, 28, 28], "render_grid.ppm".as_ref())?;
    let img = parse_ppm(&encode_grid(&originals, &blurred, [1, 28, 28])?)?;
    println!("render_grid.ppm: {} x {} pixels", img.width, img.height);
    println!("centre of the first reconstruction: {:?}", img.rgb(29 + 14, 14));
    Ok(())
}
