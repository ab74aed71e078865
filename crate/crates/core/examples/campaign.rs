//! Run the seeded demo campaign in a temporary data directory.
//!
//! `cargo run --release -p hemoloop-core --example campaign [seed]`

use hemoloop_core::refinement::campaign::{run_campaign, CampaignConfig};
use hemoloop_core::registry::Registry;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let dir = tempfile::tempdir().expect("tempdir");
    let registry = Registry::open(dir.path()).expect("open registry");
    let cfg = CampaignConfig {
        seed,
        ..Default::default()
    };
    let report = run_campaign(&registry, &cfg, &mut |line| eprintln!("{line}")).expect("campaign");
    for r in &report.rounds {
        let h = r.selected_holdout();
        let o = r.online.as_ref().expect("online replay");
        println!(
            "round {}: {} | hold-out auc {:.3} sens {:.3} spec {:.3} | online auc {:.3} sens {:.3} spec {:.3}",
            r.round_id, r.selected.name, h.auc, h.sens, h.spec, o.auc, o.sens, o.spec
        );
    }
}
