use dtn_core::gradcheck::{self, CheckResult, DEFAULT_TOL};
use dtn_core::model::ModelKind;

fn assert_all(results: Vec<CheckResult>) {
    for r in &results {
        println!(
            "{:<32} max rel err {:.3e} over {} entries",
            r.name, r.max_rel_error, r.entries
        );
    }
    for r in results {
        assert!(r.passed(), "{} failed: {:.3e}", r.name, r.max_rel_error);
    }
}

#[test]
fn layers() {
    for seed in [1, 17, 99] {
        assert_all(gradcheck::check_conv3x3(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_conv1x1(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_maxpool2(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_upsample2(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_relu(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_dense(seed, false, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_dense(seed, true, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_softmax_xent(seed, DEFAULT_TOL).unwrap());
    }
}

#[test]
fn samplers() {
    for seed in [2, 23, 404] {
        assert_all(gradcheck::check_gather(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_scatter(seed, DEFAULT_TOL).unwrap());
    }
}

#[test]
fn transform_and_localization() {
    for seed in [3, 31] {
        assert_all(gradcheck::check_tps_path(seed, DEFAULT_TOL).unwrap());
        assert_all(gradcheck::check_localization(seed, DEFAULT_TOL).unwrap());
    }
}

#[test]
fn end_to_end() {
    assert_all(gradcheck::check_network(ModelKind::Unet, 5, 50, DEFAULT_TOL).unwrap());
    assert_all(gradcheck::check_network(ModelKind::Dtn, 5, 50, DEFAULT_TOL).unwrap());
}
