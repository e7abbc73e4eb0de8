mod common;

use common::{gradcheck, random_tensor, Objective};
use uconvert_core::{
    build_espcn, build_srgan, build_uconvertnet, EspcnConfig, Model, SrganConfig, UConvertNetConfig,
};

const TOL: f64 = 1e-3;

fn tiny_srgan() -> SrganConfig {
    SrganConfig {
        residual_blocks: 1,
        gen_channels: 2,
        disc_base_channels: 2,
        disc_dense_width: 4,
        adversarial_weight: 1e-3,
    }
}

fn check_mse(mut model: Model<f64>, label: &str) {
    let x = random_tensor([2, 1, 8, 8], 1);
    let t = random_tensor([2, 1, 8, 8], 2);
    let r = gradcheck(&mut model, &x, &Objective::Mse(t));
    eprintln!("{label}: {} params, max rel {:.2e} ({})", r.checked, r.max_rel, r.worst);
    assert!(r.checked > 0);
    assert!(r.max_rel <= TOL, "{label}: {r:?}");
}

#[test]
fn uconvert_one_level_with_dropout() {
    let cfg = UConvertNetConfig {
        levels: 1,
        base_channels: 2,
        dropout_rate: 0.5,
        dropout_decoder_levels: 1,
        ..Default::default()
    };
    check_mse(build_uconvertnet(cfg, 3).unwrap(), "uconvert l1");
}

#[test]
fn uconvert_two_levels() {
    let cfg = UConvertNetConfig {
        levels: 2,
        base_channels: 2,
        dropout_rate: 0.25,
        dropout_decoder_levels: 1,
        ..Default::default()
    };
    check_mse(build_uconvertnet(cfg, 4).unwrap(), "uconvert l2");
}

#[test]
fn srgan_generator_one_block() {
    let (g, _) = build_srgan(tiny_srgan(), 5).unwrap();
    check_mse(g, "generator");
}

#[test]
fn srgan_discriminator_bce() {
    let (_, mut d) = build_srgan::<f64>(tiny_srgan(), 6).unwrap();
    let x = random_tensor([2, 1, 8, 8], 7);
    for label in [0.0, 1.0] {
        let r = gradcheck(&mut d, &x, &Objective::Bce(label));
        assert!(r.max_rel <= TOL, "discriminator label {label}: {r:?}");
    }
}

#[test]
fn espcn_without_shuffle() {
    let cfg = EspcnConfig {
        shuffle_factor: 1,
        feature_channels: [3, 2],
    };
    check_mse(build_espcn(cfg, 8).unwrap(), "espcn r1");
}

#[test]
fn espcn_with_shuffle() {
    let cfg = EspcnConfig {
        shuffle_factor: 2,
        feature_channels: [3, 2],
    };
    check_mse(build_espcn(cfg, 9).unwrap(), "espcn r2");
}
