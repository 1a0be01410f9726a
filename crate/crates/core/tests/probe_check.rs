//! Encoder information-asymmetry checks on the synthetic corpus: the
//! mark-identity probe must succeed on detail features and sit at chance on
//! blurred general features.

use msmedcap::data::generate_probe_set;
use msmedcap::encoders::{linear_probe_accuracy, Encoder, EncoderSpec};

#[test]
fn probe_asymmetry_on_mark_identity() {
    let probes = generate_probe_set(50, 4242, 64);
    let general = Encoder::new(EncoderSpec::general_default()).unwrap();
    let detail = Encoder::new(EncoderSpec::detail_default()).unwrap();

    let labels: Vec<usize> = probes.iter().map(|p| p.mark_kind).collect();
    let feats_of = |enc: &Encoder| -> Vec<Vec<f64>> {
        probes
            .iter()
            .map(|p| enc.encode(&p.image).unwrap().mean_pooled())
            .collect()
    };

    let detail_acc = linear_probe_accuracy(&feats_of(&detail), &labels, 4, 0.75, 400, 0.5);
    let general_acc = linear_probe_accuracy(&feats_of(&general), &labels, 4, 0.75, 400, 0.5);
    let chance = 0.25;
    println!("probe accuracy: detail {detail_acc:.3}, general {general_acc:.3}");
    assert!(
        detail_acc > 0.9,
        "detail probe accuracy {detail_acc} not above 0.9"
    );
    assert!(
        general_acc <= chance + 0.1,
        "general probe accuracy {general_acc} above chance band"
    );
}
