mod common;

use common::*;
use reshape_core::body::ShapeParams;
use reshape_core::mapping::{slider_state, AttributeEdit};
use reshape_core::render::ConditioningImage;
use reshape_service::protocol::{GenerationParams, CANONICAL_PROMPTS, MAX_ATTEMPTS, NEUTRAL_PROMPT};
use reshape_service::{stub, ServiceError};
use tokio::task::block_in_place;

const BETA: [f64; 5] = [0.0, 0.1, -0.2, 0.1, 0.0];

#[test]
fn create_reload_and_reject() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), None);
    let a = svc.create_project(&reference_png()).unwrap();
    let b = svc.create_project(&reference_png()).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(svc.load(&a.id).unwrap(), a);
    assert_eq!((a.reference.width, a.reference.height), (48, 64));
    assert!(a.history.is_empty());
    assert_eq!(svc.reference_png(&a.id).unwrap(), reference_png());

    let mut corrupt = reference_png();
    corrupt.truncate(40);
    assert!(matches!(svc.create_project(&corrupt), Err(ServiceError::Decode(_))));
    assert!(matches!(svc.create_project(b"not an image"), Err(ServiceError::Decode(_))));
    assert_eq!(svc.store().list().unwrap().len(), 2);
}

#[test]
fn fit_import_sets_sliders_from_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), None);
    let id = svc.create_project(&reference_png()).unwrap().id;
    let entry = svc.import_fit(&id, fit_doc(BETA.to_vec())).unwrap();
    let want = slider_state(svc.model(), svc.map(), &ShapeParams(BETA.to_vec())).unwrap();
    assert_eq!(entry.slider_state, want);
    assert_eq!(entry.beta, BETA);

    let mut short = fit_doc(BETA.to_vec());
    short.beta.pop();
    assert!(matches!(svc.import_fit(&id, short), Err(ServiceError::InvalidFit(_))));
    let mut bad_theta = fit_doc(BETA.to_vec());
    bad_theta.theta.push(0.0);
    assert!(matches!(svc.import_fit(&id, bad_theta), Err(ServiceError::InvalidFit(_))));
    let mut nan = fit_doc(BETA.to_vec());
    nan.beta[0] = f64::NAN;
    assert!(matches!(svc.import_fit(&id, nan), Err(ServiceError::InvalidFit(_))));

    let second = svc.import_fit(&id, fit_doc(vec![0.3; 5])).unwrap();
    let p = svc.load(&id).unwrap();
    assert_eq!(p.fits.len(), 2);
    assert_eq!(p.history.len(), 2);
    assert_eq!((p.history[0].fit, second.fit), (0, 1));
    assert_eq!(p.fits[0].fit.beta, BETA);

    let schema: Result<reshape_service::FitDocument, _> =
        serde_json::from_str(r#"{"beta":[0,0,0,0,0],"theta":[0,0,0,0,0,0]}"#);
    assert!(schema.is_err(), "camera is required");
    assert!(matches!(svc.import_fit("missing", fit_doc(BETA.to_vec())), Err(ServiceError::NotFound(_))));
}

#[test]
fn slider_edits() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), None);
    let id = svc.create_project(&reference_png()).unwrap().id;
    assert!(matches!(svc.apply_sliders(&id, &[AttributeEdit::delta("weight", 1.0)]), Err(ServiceError::NoFit(_))));
    let first = svc.import_fit(&id, fit_doc(BETA.to_vec())).unwrap();
    let first_img = ConditioningImage::from_png(&svc.conditioning_png(&id, None).unwrap()).unwrap();

    let (same, img) = svc.apply_sliders(&id, &[]).unwrap();
    for (a, b) in same.beta.iter().zip(&first.beta) {
        assert!((a - b).abs() < 1e-6);
    }
    let worst = img.data.iter().zip(&first_img.data).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
    assert!(worst <= 1, "empty edit moved a pixel by {worst}");

    let (heavier, heavy_img) = svc.apply_sliders(&id, &[AttributeEdit::delta("weight", 8.0)]).unwrap();
    assert!(heavy_img.foreground_count() > img.foreground_count());
    assert!((heavier.slider_state.weight - same.slider_state.weight - 8.0).abs() < 0.1);

    let err = svc.apply_sliders(&id, &[AttributeEdit::delta("wingspan", 1.0)]).unwrap_err();
    assert!(err.to_string().contains("wingspan"));

    let p = svc.load(&id).unwrap();
    assert_eq!(p.history.len(), 3);
    assert!(p.history.iter().all(|e| e.fit == 0));
    assert_eq!(p.fits[0].fit, fit_doc(BETA.to_vec()), "pose and camera untouched");
    let mesh = svc.mesh(&id, None).unwrap();
    assert_eq!(mesh.entry, 2);
    assert_eq!(mesh.vertices.len(), svc.model().num_vertices());
    assert!(matches!(svc.mesh(&id, Some(9)), Err(ServiceError::NoSuchEntry { index: 9, len: 3 })));
    assert!(svc.replay(&id).unwrap().is_exact());
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), None);
    let id = svc.create_project(&reference_png()).unwrap().id;
    svc.import_fit(&id, fit_doc(BETA.to_vec())).unwrap();
    svc.apply_sliders(&id, &[AttributeEdit::delta("height", 0.05)]).unwrap();
    let mut p = svc.load(&id).unwrap();
    p.history[1].beta[0] = f64::from_bits(p.history[1].beta[0].to_bits() ^ 1);
    svc.store().save(&p).unwrap();
    let report = svc.replay(&id).unwrap();
    assert_eq!(report.mismatches.len(), 1);
    assert_eq!(report.mismatches[0].entry, 1);
}

fn project_with_fit(svc: &reshape_service::Service) -> String {
    let id = svc.create_project(&reference_png()).unwrap().id;
    svc.import_fit(&id, fit_doc(BETA.to_vec())).unwrap();
    id
}

#[tokio::test(flavor = "multi_thread")]
async fn generation_against_stub() {
    let url = spawn_stub(stub::StubOptions::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), Some(url));
    let id = block_in_place(|| project_with_fit(&svc));
    let rec = svc
        .request_generation(&id, None, GenerationParams { seed: 4, ..GenerationParams::new(CANONICAL_PROMPTS[0]) })
        .await
        .unwrap();
    assert_eq!(rec.attempts.len(), 1);
    assert_eq!(rec.backend.as_ref().unwrap().request_digest, rec.request_digest);
    let out = image::load_from_memory(&svc.output_png(&id, 0).unwrap()).unwrap().into_rgb8();
    let cond = ConditioningImage::from_png(&svc.conditioning_png(&id, Some(0)).unwrap()).unwrap();
    assert_eq!(out.dimensions(), (cond.width, cond.height));
    let gray = cond.to_gray_image();
    assert_eq!(out, stub::tint(&gray));

    let again = svc.request_generation(&id, Some(0), GenerationParams::new(NEUTRAL_PROMPT)).await.unwrap();
    assert_ne!(again.request_digest, rec.request_digest);
    let p = svc.load(&id).unwrap();
    assert_eq!(p.generations.len(), 2);
    assert!(p.generations.iter().all(|g| g.history_entry < p.history.len()));
}

#[tokio::test(flavor = "multi_thread")]
async fn prompt_checked_before_network() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), Some(dead_url()));
    let id = block_in_place(|| project_with_fit(&svc));
    let err = svc.request_generation(&id, None, GenerationParams::new("make them tall")).await.unwrap_err();
    assert!(matches!(err, ServiceError::NonCanonicalPrompt(_)));
    assert!(svc.load(&id).unwrap().generations.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_backend_retries_then_fails() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), Some(dead_url()));
    let id = block_in_place(|| project_with_fit(&svc));
    let err = svc.request_generation(&id, None, GenerationParams::new(NEUTRAL_PROMPT)).await.unwrap_err();
    assert!(matches!(err, ServiceError::Unreachable { attempts: MAX_ATTEMPTS, .. }), "{err}");
    let p = svc.load(&id).unwrap();
    let rec = &p.generations[0];
    assert_eq!(rec.attempts.len(), MAX_ATTEMPTS);
    assert!(rec.attempts.iter().all(|a| a.error.is_some()));
    assert!(rec.attempts.windows(2).all(|w| w[1].unix_ms >= w[0].unix_ms + 10), "backoff between attempts");
    assert!(rec.output_sha256.is_none() && rec.error.is_some());
}

#[tokio::test(flavor = "multi_thread")]
async fn backend_error_is_passed_through() {
    let payload = r#"{"detail":"CUDA out of memory"}"#;
    let url = spawn_stub(stub::StubOptions { fail_with: Some((500, payload.into())) }).await;
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), Some(url));
    let id = block_in_place(|| project_with_fit(&svc));
    match svc.request_generation(&id, None, GenerationParams::new(NEUTRAL_PROMPT)).await {
        Err(ServiceError::Backend { status, body }) => assert_eq!((status, body.as_str()), (500, payload)),
        other => panic!("expected backend error, got {:?}", other.map(|r| r.index)),
    }
    assert_eq!(svc.load(&id).unwrap().generations[0].attempts.len(), 1, "HTTP errors are not retried");
}

#[tokio::test(flavor = "multi_thread")]
async fn no_backend_configured() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), None);
    let id = block_in_place(|| project_with_fit(&svc));
    let err = svc.request_generation(&id, None, GenerationParams::new(NEUTRAL_PROMPT)).await.unwrap_err();
    assert!(matches!(err, ServiceError::NoBackend));
}
