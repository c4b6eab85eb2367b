use diana_core::overlay::{model_check, JoinRequest, ModelCheckConfig, OverlayConfig};

fn joins(n: usize) -> Vec<JoinRequest> {
    let names = ["A", "B", "C", "D", "E", "F"];
    let availability = [0.5, 0.9, 0.3, 0.7, 0.9, 0.1];
    (0..n)
        .map(|i| {
            let mut j = JoinRequest::new(names[i], availability[i], 1);
            for k in (0..n).filter(|&k| k != i) {
                j = j.with_cost(names[k], ((i * 7 + k * 3) % 5) as f64);
            }
            j
        })
        .collect()
}

#[test]
fn four_nodes_two_crashes() {
    let config = ModelCheckConfig {
        overlay: OverlayConfig { subgrid_min: 100 },
        joins: joins(4),
        max_crashes: 2,
    };
    let report = model_check(&config).unwrap();
    assert!(report.failovers > 0 && report.quiescent_states > 0);
}

/// About 5.6 million states; takes close to two minutes in a release build.
#[test]
#[ignore]
fn six_nodes_one_subgrid_two_crashes() {
    let config = ModelCheckConfig {
        overlay: OverlayConfig { subgrid_min: 100 },
        joins: joins(6),
        max_crashes: 2,
    };
    let report = model_check(&config).unwrap();
    assert!(report.failovers > 0);
}
