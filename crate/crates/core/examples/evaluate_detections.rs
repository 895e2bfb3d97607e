//! Renders ground-truth scenes, runs the detector oracle on them and on
//! corrupted copies, and prints the resulting metric reports.
//!
//! cargo run --example evaluate_detections

use macguide::eval::{detect, detections_to_csv, evaluate, report_rows_to_csv, DetectorConfig, EvalItem};
use macguide::model::{make_scene, Color, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let prompts = [
        "two red square and one blue circle",
        "three yellow circle",
        "one green square and one red circle",
    ];
    let mut clean = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let scene = make_scene(&p.parse::<SceneSpec>()?, i as u64)?;
        clean.push(EvalItem {
            image_id: format!("scene{i}"),
            detections: detect(&scene.image, &Color::ALL, &DetectorConfig::default()),
            layout: scene.layout,
        });
    }
    let report = evaluate(&clean)?;
    println!("rendered scenes: P {:.2} R {:.2} F1 {:.2}", report.precision, report.recall, report.f1);
    println!(
        "spatial {:?} size {:?} color {:?}",
        report.spatial_acc, report.size_acc, report.color_acc
    );

    // Drop one detection per image and recolor another.
    let mut damaged = clean.clone();
    for item in &mut damaged {
        item.detections.pop();
        if let Some(d) = item.detections.first_mut() {
            d.color = if d.color == Color::Green { Color::Red } else { Color::Green };
            d.label = format!("{} {}", d.color, d.shape);
        }
    }
    let report = evaluate(&damaged)?;
    println!("\ndamaged detections: P {:.2} R {:.2} F1 {:.2}", report.precision, report.recall, report.f1);
    println!("color {:?}", report.color_acc);
    print!("\n{}", report_rows_to_csv(&report.rows));

    let rows: Vec<_> = damaged
        .iter()
        .flat_map(|i| i.detections.iter().map(|d| (i.image_id.clone(), d.clone())))
        .collect();
    print!("\n{}", detections_to_csv(&rows));
    Ok(())
}
