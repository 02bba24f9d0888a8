use proptest::prelude::*;
use ssr::nn::{LayerParams, Network, NetworkSpec};
use ssr::prox::{prox, ProxInput, RegularizerKind};
use ssr::prune::{compact_all, prunable_layers, MaskOrigin, PruneMask};
use ssr::report::count_params;
use ssr::tensor::Matrix;

fn matrix() -> impl Strategy<Value = Matrix<f64>> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn kind() -> impl Strategy<Value = RegularizerKind> {
    prop::sample::select(RegularizerKind::ALL.to_vec())
}

/// Trainable entries plus batch-norm scale and shift.
fn stored_params(net: &Network) -> usize {
    net.params()
        .iter()
        .map(|p| match p {
            LayerParams::BatchNorm(bn) => bn.gamma.len() + bn.beta.len(),
            other => other.trainable().map_or(0, |(w, b)| w.len() + b.len()),
        })
        .sum()
}

proptest! {
    #[test]
    fn prox_beats_random_competitors(
        t2 in matrix(),
        kind in kind(),
        lambda in 0.0f64..3.0,
        rho in 0.1f64..3.0,
        seeds in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let input = ProxInput::new(t2.clone(), lambda, rho).unwrap();
        let best = input.objective(kind, &prox(kind, &input));
        let n = t2.data().len();
        for chunk in seeds.chunks(8) {
            let other = Matrix::from_vec(t2.rows(), t2.cols(), (0..n).map(|i| chunk[i % chunk.len()] * t2.data()[i]).collect()).unwrap();
            prop_assert!(best <= input.objective(kind, &other) + 1e-9);
        }
        prop_assert!(best <= input.objective(kind, &t2) + 1e-9);
        prop_assert!(best <= input.objective(kind, &Matrix::zeros(t2.rows(), t2.cols())) + 1e-9);
    }

    #[test]
    fn l20_threshold(t2 in matrix(), lambda in 0.01f64..3.0, rho in 0.1f64..3.0) {
        let out = prox(RegularizerKind::L20, &ProxInput::new(t2.clone(), lambda, rho).unwrap());
        for i in 0..t2.rows() {
            let sq: f64 = t2.row(i).iter().map(|v| v * v).sum();
            let kept = out.row(i).iter().any(|&v| v != 0.0);
            prop_assert_eq!(kept, sq > 2.0 * lambda / rho);
        }
    }

    #[test]
    fn compaction_matches_accounting(flags in prop::collection::vec(any::<bool>(), 20 + 50 + 500), seed in 0u64..1000) {
        let net = Network::init(NetworkSpec::lenet(), seed).unwrap();
        let mut offset = 0;
        let mut masks = Vec::new();
        for name in prunable_layers(&net) {
            let width = net.spec().width(net.layer_index(&name).unwrap()).unwrap();
            let mut keep = flags[offset..offset + width].to_vec();
            keep[0] = true;
            offset += width;
            masks.push(PruneMask::new(name, keep, MaskOrigin::Random));
        }
        let pruned = compact_all(&net, &masks).unwrap();
        let widths: Vec<String> = masks.iter().map(|m| m.kept().to_string()).collect();
        prop_assert_eq!(pruned.spec().filter_counts(), widths.join("-"));
        prop_assert_eq!(stored_params(&pruned), count_params(pruned.spec()).unwrap());
    }
}
