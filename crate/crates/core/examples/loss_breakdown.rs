//! Scores hand-built attention maps against a two-box layout and shows how
//! the region, marginal and regularization terms react.
//!
//! cargo run --example loss_breakdown

use macguide::attention::EnhancedPhraseMap;
use macguide::layout::{rasterize, BoundingBox};
use macguide::losses::{combined_loss, marginal_loss, regularization_loss, region_loss, Ablation};
use macguide::numeric::Tensor;

const G: usize = 16;

fn blob(cx: f64, cy: f64, r: f64) -> Tensor {
    Tensor::from_fn(&[G, G], |i| {
        let (x, y) = ((i % G) as f64 + 0.5, (i / G) as f64 + 0.5);
        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp()
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two adjacent boxes for one phrase.
    let boxes = [
        BoundingBox::new(0.125, 0.25, 0.5, 0.75)?,
        BoundingBox::new(0.5, 0.25, 0.875, 0.75)?,
    ];
    let masks = [rasterize(&boxes, G, G)?];
    let two = blob(5.0, 8.0, 1.5).zip_map(&blob(11.0, 8.0, 1.5), f64::max)?;
    let cases = [
        ("one blob on the shared edge", blob(8.0, 8.0, 2.0)),
        ("one blob in the left box", blob(5.0, 8.0, 1.5)),
        ("one blob per box", two),
        ("blob outside both boxes", blob(8.0, 1.5, 1.5)),
    ];
    println!("{:<30} {:>7} {:>7} {:>7} {:>7}", "map", "L_r", "L_m", "L_reg", "L_mac");
    for (name, map) in cases {
        let m = map.map(|v| v / map.max());
        let maps = [EnhancedPhraseMap { phrase_index: 0, map: m }];
        let r = region_loss(&maps, &masks)?.value;
        let mg = marginal_loss(&maps, &masks)?.value;
        let reg = regularization_loss(&maps, &masks)?.value;
        let b = combined_loss(r, mg, reg, 0.5, 0.5, Ablation::Full)?;
        println!(
            "{name:<30} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            b.region, b.marginal, b.regularization, b.combined
        );
    }
    Ok(())
}
