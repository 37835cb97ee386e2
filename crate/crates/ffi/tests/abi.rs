// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use xconsist::toymodel::{checkpoint, ClozeInput, Decoder, Model, ModelConfig, ReadMode, Readout, Vocabulary};
use xconsist::Arch;
use xconsist_ffi::*;

fn last_error() -> Option<String> {
    let p = xc_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn saved_model(dir: &Path, arch: Arch) -> (Model, PathBuf) {
    let vocab = Vocabulary::from_texts(["paris berlin rome capital of france germany italy is the"]);
    let model = Model::init(ModelConfig::new(arch, 2, 8, 12, 2, 5), vocab).unwrap();
    let path = dir.join(format!("{arch:?}.ckpt"));
    checkpoint::save(&model, &path).unwrap();
    (model, path)
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(xc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn swapped_pair_of_two_scores_one_over_one_plus_e() {
    let cm = [1u32, 2];
    let mono = [2u32, 1];
    let mut r = f64::NAN;
    let status = unsafe { xc_rankc(cm.as_ptr(), mono.as_ptr(), 1, 2, 1, &mut r) };
    assert_eq!(status, XcStatus::Ok);
    assert!((r - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);

    let mut t = f64::NAN;
    assert_eq!(unsafe { xc_top1(cm.as_ptr(), mono.as_ptr(), 1, 2, 1, &mut t) }, XcStatus::Ok);
    assert_eq!(t, 0.0);
}

#[test]
fn rankc_averages_over_probes_with_multi_token_sequences() {
    // probe 0 identical, probe 1 disjoint
    let cm = [1u32, 2, 3, 4, /* probe 1 */ 5, 6, 7, 8];
    let mono = [1u32, 2, 3, 4, /* probe 1 */ 9, 9, 8, 8];
    let mut r = f64::NAN;
    assert_eq!(unsafe { xc_rankc(cm.as_ptr(), mono.as_ptr(), 2, 2, 2, &mut r) }, XcStatus::Ok);
    assert!((r - 0.5).abs() < 1e-15);
    let mut t = f64::NAN;
    assert_eq!(unsafe { xc_top1(cm.as_ptr(), mono.as_ptr(), 2, 2, 2, &mut t) }, XcStatus::Ok);
    assert_eq!(t, 0.5);
}

#[test]
fn errors_map_to_status_codes_and_messages() {
    let mut r = 0.0;
    assert_eq!(unsafe { xc_rankc(ptr::null(), ptr::null(), 1, 2, 1, &mut r) }, XcStatus::Null);
    assert!(last_error().unwrap().contains("cm"));

    let dup = [3u32, 3];
    assert_eq!(unsafe { xc_rankc(dup.as_ptr(), dup.as_ptr(), 1, 2, 1, &mut r) }, XcStatus::Model);
    assert!(last_error().unwrap().contains("duplicate"));

    assert_eq!(unsafe { xc_rankc(ptr::null(), ptr::null(), 0, 2, 1, &mut r) }, XcStatus::Undefined);

    let ok = [1u32, 2];
    assert_eq!(unsafe { xc_rankc(ok.as_ptr(), ok.as_ptr(), 1, 2, 1, &mut r) }, XcStatus::Ok);
    assert_eq!(last_error(), None);

    assert_eq!(unsafe { xc_rankc(ok.as_ptr(), ok.as_ptr(), 1, 2, 1, ptr::null_mut()) }, XcStatus::Null);
}

#[test]
fn cka_and_spearman_match_the_library() {
    let x: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let y: Vec<f64> = (0..18).map(|i| ((i * 5) % 13) as f64).collect();
    let mut c = f64::NAN;
    assert_eq!(unsafe { xc_cka_linear(x.as_ptr(), y.as_ptr(), 6, 4, 3, &mut c) }, XcStatus::Ok);
    let want = xconsist::repsim::cka_linear(
        &xconsist::toymodel::Mat::from_vec(6, 4, x.clone()),
        &xconsist::toymodel::Mat::from_vec(6, 3, y),
    )
    .unwrap();
    assert_eq!(c, want);
    assert_eq!(unsafe { xc_cka_linear(x.as_ptr(), x.as_ptr(), 6, 4, 4, &mut c) }, XcStatus::Ok);
    assert!((c - 1.0).abs() < 1e-12);

    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 4.0, 5.0, 9.0, 10.0];
    let (mut rho, mut p) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { xc_spearman(a.as_ptr(), b.as_ptr(), 5, &mut rho, &mut p) }, XcStatus::Ok);
    assert_eq!(rho, 1.0);
    assert_eq!(p, 0.0);

    let flat = [1.0; 5];
    assert_eq!(unsafe { xc_spearman(a.as_ptr(), flat.as_ptr(), 5, &mut rho, &mut p) }, XcStatus::Undefined);
}

#[test]
fn model_handle_round_trip_and_candidates() {
    let dir = tempfile::tempdir().unwrap();
    for (arch, prompt, n_object) in [
        (Arch::Encoder, "the capital of france is <mask> <mask>", 0),
        (Arch::EncoderDecoder, "the capital of france is <extra_id_0>", 2),
        (Arch::Decoder, "the capital of france is", 2),
    ] {
        let (model, path) = saved_model(dir.path(), arch);
        let mut handle = ptr::null_mut();
        assert_eq!(unsafe { xc_model_load(cstr(&path).as_ptr(), &mut handle) }, XcStatus::Ok);
        let mut n = 0;
        assert_eq!(unsafe { xc_model_n_layers(handle, &mut n) }, XcStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(unsafe { xc_model_vocab_size(handle, &mut n) }, XcStatus::Ok);
        assert_eq!(n, model.vocab_size());

        let cloze = ClozeInput::from_text(arch, prompt, model.vocab(), 2).unwrap();
        let prompt_c = CString::new(prompt).unwrap();
        for (layer, readout) in [(-1, Readout::Final), (0, Readout::Layer(0))] {
            let want = Decoder::new(&model, &cloze, ReadMode::Single(readout))
                .candidates(readout, 4, 4)
                .unwrap();
            let mut tokens = [u32::MAX; 8];
            let mut lp = [f64::NAN; 4];
            let (mut n_obj, mut count) = (0, 0);
            let status = unsafe {
                xc_model_candidates(
                    handle,
                    prompt_c.as_ptr(),
                    n_object,
                    layer,
                    4,
                    tokens.as_mut_ptr(),
                    tokens.len(),
                    lp.as_mut_ptr(),
                    &mut n_obj,
                    &mut count,
                )
            };
            assert_eq!(status, XcStatus::Ok, "{arch:?}: {:?}", last_error());
            assert_eq!((n_obj, count), (2, 4));
            for (i, h) in want.iter().enumerate() {
                assert_eq!(&tokens[i * 2..i * 2 + 2], h.tokens.as_slice());
                assert_eq!(lp[i].to_bits(), h.logprob.to_bits());
            }
        }

        let mut small = [0u32; 3];
        let mut lp = [0.0; 4];
        let (mut n_obj, mut count) = (0, 0);
        let call = |layer: i32, buf: &mut [u32], lp: &mut [f64], n_obj: &mut usize, count: &mut usize| unsafe {
            xc_model_candidates(handle, prompt_c.as_ptr(), n_object, layer, 4, buf.as_mut_ptr(), buf.len(), lp.as_mut_ptr(), n_obj, count)
        };
        assert_eq!(call(-1, &mut small, &mut lp, &mut n_obj, &mut count), XcStatus::Argument);
        assert!(last_error().unwrap().contains("need 8"));
        let mut buf = [0u32; 8];
        assert_eq!(call(2, &mut buf, &mut lp, &mut n_obj, &mut count), XcStatus::Argument);
        unsafe { xc_model_free(handle) };
    }
    unsafe { xc_model_free(ptr::null_mut()) };
}

#[test]
fn unknown_words_and_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = cstr(&dir.path().join("none.ckpt"));
    assert_eq!(unsafe { xc_model_load(missing.as_ptr(), &mut handle) }, XcStatus::Io);
    assert!(handle.is_null());
    assert_eq!(unsafe { xc_model_load(ptr::null(), &mut handle) }, XcStatus::Null);

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, [9u8, 1, 2, 3]).unwrap();
    assert_eq!(unsafe { xc_model_load(cstr(&garbage).as_ptr(), &mut handle) }, XcStatus::Config);

    let (_, path) = saved_model(dir.path(), Arch::Encoder);
    assert_eq!(unsafe { xc_model_load(cstr(&path).as_ptr(), &mut handle) }, XcStatus::Ok);
    let prompt = CString::new("zebra <mask>").unwrap();
    let mut buf = [0u32; 4];
    let mut lp = [0.0; 4];
    let (mut n, mut c) = (0, 0);
    let status = unsafe {
        xc_model_candidates(handle, prompt.as_ptr(), 0, -1, 4, buf.as_mut_ptr(), 4, lp.as_mut_ptr(), &mut n, &mut c)
    };
    assert_eq!(status, XcStatus::Argument);
    assert!(last_error().unwrap().contains("zebra"));
    unsafe { xc_model_free(handle) };
}

fn write_config(dir: &Path, analyses: &[&str]) -> PathBuf {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/mlama-mini");
    let cfg = serde_json::json!({
        "corpus": corpus,
        "matrix_lang": "en",
        "embedded_langs": ["de"],
        "model": {"fixture": {
            "config": {"arch": "encoder", "n_layers": 2, "d_model": 8, "d_ff": 12, "n_heads": 2, "seed": 3},
            "train": {"steps": 10}
        }},
        "model_id": "ffi",
        "k": 3,
        "max_probes": 3,
        "analyses": analyses,
        "output_dir": dir.join("out"),
    });
    let path = dir.join("exp.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn experiments_run_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &["consistency"]);
    let mut code = -1;
    assert_eq!(unsafe { xc_run_experiment(cstr(&cfg).as_ptr(), &mut code) }, XcStatus::Ok);
    assert_eq!(code, 0);
    assert!(dir.path().join("out/report.csv").is_file());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(unsafe { xc_run_experiment(cstr(&bad).as_ptr(), &mut code) }, XcStatus::Config);
    assert_eq!(code, 2);
}
