mod common;

use archevo::arch::{analyze, build_graph, count_parameters};
use archevo::genome::{parse_genome, GeMode};
use common::oracle::{conv, yolov3_layers};
use common::listing_text;

fn yolov3() -> archevo::arch::ArchGraph {
    let g = parse_genome(&listing_text("yolov3.yaml"), GeMode::Ge1).unwrap();
    build_graph(&g, None).unwrap()
}

#[test]
fn hand_expansion_total() {
    // Ultralytics reports 103,754,144 parameters for this model.
    assert_eq!(yolov3_layers().iter().sum::<u64>(), 103_754_144);
    assert_eq!(count_parameters(&yolov3(), 80), 103_754_144);
}

#[test]
fn per_layer_agreement() {
    let report = analyze(&yolov3(), (640, 640));
    let got: Vec<u64> = report.per_layer.iter().map(|l| l.params).collect();
    assert_eq!(got, yolov3_layers());
}

#[test]
fn first_conv_is_928() {
    assert_eq!(conv(3, 32, 3), 928);
    assert_eq!(analyze(&yolov3(), (640, 640)).per_layer[0].params, 928);
}

#[test]
fn reference_scaled_models() {
    // Published Ultralytics totals for the n and s scales.
    let g = parse_genome(&listing_text("yolov8.yaml"), GeMode::Ge2).unwrap();
    for (scale, want) in [("n", 3_157_200u64), ("s", 11_166_560)] {
        let graph = build_graph(&g, Some(scale)).unwrap();
        assert_eq!(count_parameters(&graph, graph.nc), want, "scale {scale}");
    }
}
