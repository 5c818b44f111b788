use std::sync::OnceLock;

use gvae::coder::Bitstream;
use gvae::gain::RateSelector;
use gvae::image::Image;
use gvae::metrics::psnr;
use gvae::model::{CodecConfig, Model, Variant, B_MSE};
use gvae::quant::{Quantizer, QuantizerMode};
use gvae::training::{procedural_corpus, train, TrainConfig};
use gvae::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> Model {
    let cfg = CodecConfig {
        channels: 8,
        hidden: 8,
        hyper_channels: 4,
        ..CodecConfig::toy(variant)
    };
    Model::new(cfg, 17).unwrap()
}

/// A CVR model trained just long enough for its rates to separate.
fn briefly_trained() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = TrainConfig {
            lagrange: B_MSE.to_vec(),
            epochs: 2,
            steps_per_epoch: 200,
            learning_rate: 1e-3,
            halve_lr_at_epoch: None,
            gain_lr_scale: 10.0,
            channels: 16,
            hidden: 16,
            eval_patches: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        train(&cfg, None).unwrap().model
    })
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, |_, _, _| rng.gen())
}

#[test]
fn odd_dimensions_survive_the_roundtrip() {
    for variant in [Variant::Cvr, Variant::Hcvr] {
        let model = small(variant);
        for (w, h) in [(1, 1), (7, 13), (33, 9), (16, 16)] {
            let img = noise_image(w, h, (w * 100 + h) as u64);
            let enc = model
                .encode_image(&img, RateSelector { s: 1, l: 0.25 }, Quantizer::new(QuantizerMode::Round, 0))
                .unwrap();
            let bytes = enc.bitstream.pack().unwrap();
            let dec = model.decode(&Bitstream::unpack(&bytes).unwrap()).unwrap();
            assert_eq!((dec.image.width(), dec.image.height()), (w, h), "{variant:?}");
        }
    }
}

#[test]
fn bpp_counts_payload_bytes_and_tracks_the_estimate() {
    for variant in [Variant::Cvr, Variant::Hcvr] {
        let model = small(variant);
        for mode in [QuantizerMode::Round, QuantizerMode::Universal] {
            let img = &procedural_corpus(1, 48, 3)[0];
            let enc = model
                .encode_image(img, RateSelector { s: 2, l: 0.5 }, Quantizer::new(mode, 9))
                .unwrap();
            let bytes: usize = enc.bitstream.payloads.iter().map(Vec::len).sum();
            let expected = 8.0 * bytes as f64 / (48.0 * 48.0);
            assert_eq!(enc.bpp, expected);
            // Each range-coded payload may exceed its ideal length by a
            // flush of at most 32 bits plus byte alignment.
            let actual = 8.0 * bytes as f64;
            let slack = 40.0 * enc.bitstream.payloads.len() as f64;
            assert!(
                actual >= enc.estimated_bits - 1.0 && actual <= enc.estimated_bits * 1.005 + slack,
                "{variant:?}/{mode:?}: {actual} bits vs estimate {}",
                enc.estimated_bits
            );
        }
    }
}

#[test]
fn decoding_at_the_wrong_rate_costs_quality() {
    let model = briefly_trained();
    let img = &procedural_corpus(1, 64, 77)[0];
    let sel = RateSelector { s: 0, l: 0.0 };
    let enc = model.encode_image(img, sel, Quantizer::new(QuantizerMode::Round, 0)).unwrap();
    let right = model.decode(&enc.bitstream).unwrap();
    let wrong = model
        .decode_with_selector(&enc.bitstream, RateSelector { s: 4, l: 1.0 })
        .unwrap();
    let (p_right, p_wrong) = (psnr(img, &right.image).unwrap(), psnr(img, &wrong.image).unwrap());
    assert!(p_wrong < p_right, "mismatched rate gave {p_wrong:.2} dB vs {p_right:.2} dB");
}

#[test]
fn reconstruct_matches_decode() {
    let model = small(Variant::Cvr);
    let img = noise_image(20, 12, 4);
    let sel = RateSelector { s: 3, l: 0.75 };
    let enc = model.encode_image(&img, sel, Quantizer::new(QuantizerMode::Round, 0)).unwrap();
    let dec = model.decode(&enc.bitstream).unwrap();
    let again = model.reconstruct(&dec.latent, sel, 20, 12).unwrap();
    assert_eq!(again, dec.image);
}

#[test]
fn all_zero_latent_reconstructs_at_the_declared_size() {
    let model = small(Variant::Cvr);
    let c = model.config().channels;
    // 24×24 pads to 24, so the latent is 3×3 per channel.
    let img = model
        .reconstruct(&vec![0.0; c * 3 * 3], RateSelector { s: 0, l: 0.0 }, 24, 24)
        .unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    assert!(model
        .reconstruct(&vec![0.0; c * 3 * 3 + 1], RateSelector { s: 0, l: 0.0 }, 24, 24)
        .is_err());
}

#[test]
fn bitstreams_are_tied_to_their_model() {
    let a = small(Variant::Cvr);
    let b = Model::new(a.config().clone(), 18).unwrap();
    let enc = a
        .encode_image(&noise_image(8, 8, 1), RateSelector { s: 0, l: 0.0 }, Quantizer::new(QuantizerMode::Round, 0))
        .unwrap();
    assert!(matches!(b.decode(&enc.bitstream), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn corrupted_bytes_never_panic() {
    let model = small(Variant::Hcvr);
    let enc = model
        .encode_image(&noise_image(16, 16, 2), RateSelector { s: 1, l: 0.5 }, Quantizer::new(QuantizerMode::Universal, 3))
        .unwrap();
    let bytes = enc.bitstream.pack().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let mut b = bytes.clone();
        match rng.gen_range(0..3) {
            0 => b.truncate(rng.gen_range(0..b.len())),
            1 => {
                let i = rng.gen_range(0..b.len());
                b[i] ^= 1 << rng.gen_range(0..8);
            }
            _ => b.push(rng.gen()),
        }
        // Any outcome is fine except a panic; a decode that succeeds must
        // still produce an image of the declared size.
        if let Ok(bs) = Bitstream::unpack(&b) {
            if let Ok(dec) = model.decode(&bs) {
                assert_eq!(dec.image.width() as u32, bs.header.width);
            }
        }
    }
}
