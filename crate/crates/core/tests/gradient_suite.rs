use std::time::Instant;

use stpnet::gradcheck::{failures, run_suite, SuiteConfig};
use stpnet::StpnetConfig;

#[test]
fn every_block_and_loss_matches_finite_differences() {
    let t0 = Instant::now();
    let out = run_suite(&StpnetConfig::reduced(), &SuiteConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    for o in &out {
        println!("{:<24} max_rel {:.3e} over {} coords", o.name, o.report.max_rel_error, o.report.checked);
    }
    assert!(failures(&out).is_empty(), "failed: {:?}", failures(&out));
    for name in ["enblock", "mtblock", "ssm", "utrans", "upblock", "retrieval_encoder", "seg_loss", "retrieval_loss", "focal_loss"] {
        let o = out.iter().find(|o| o.name == name).unwrap();
        assert!(o.report.checked >= 100, "{name} checked only {}", o.report.checked);
    }
    assert!(secs <= 300.0, "suite took {secs:.1}s");
}

#[test]
fn corrupted_conv_backward_is_reported_by_name() {
    let cfg = SuiteConfig { fault: Some("conv2d"), samples: 20, e2e_samples: 20, ..SuiteConfig::default() };
    let out = run_suite(&StpnetConfig::reduced(), &cfg).unwrap();
    let failed = failures(&out);
    assert!(failed.contains(&"op:conv2d"), "{failed:?}");
    assert!(!failed.contains(&"op:softmax"), "{failed:?}");
    assert!(failed.contains(&"enblock"), "{failed:?}");
}
