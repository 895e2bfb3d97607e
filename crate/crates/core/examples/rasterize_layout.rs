//! Parses a layout and prints each phrase's interior and boundary masks on a
//! 16x16 attention grid.
//!
//! cargo run --example rasterize_layout -- [layout_file]

use macguide::layout::{parse_layout, rasterize, CellGrid};

const SAMPLE: &str = "\
# two squares on the left, a circle on the right
<sot> two red square and one blue circle <eot>
phrase 2,3 0.05 0.10 0.40 0.40
phrase 2,3 0.05 0.55 0.40 0.90
phrase 6,7 0.50 0.30 0.95 0.75
";

fn show(interior: &CellGrid, boundary: &CellGrid) {
    for y in 0..interior.height {
        let row: String = (0..interior.width)
            .map(|x| match (interior.get(x, y), boundary.get(x, y)) {
                (true, _) => '#',
                (_, true) => '+',
                _ => '.',
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => SAMPLE.to_string(),
    };
    let layout = parse_layout(&text)?;
    println!("prompt: {}", layout.prompt_tokens.join(" "));
    for phrase in &layout.phrases {
        let masks = rasterize(&phrase.boxes, 16, 16)?;
        let words: Vec<&str> = phrase.tokens.iter().map(|&t| layout.prompt_tokens[t].as_str()).collect();
        println!(
            "\nphrase {} `{}`: {} box(es), {} interior cells, {} boundary cells, perimeter sum {}",
            phrase.index,
            words.join(" "),
            phrase.boxes.len(),
            masks.interior.count(),
            masks.boundary.count(),
            masks.perimeter_sum
        );
        show(&masks.interior, &masks.boundary);
    }
    Ok(())
}
