use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use reshape_core::body::{BodyModel, Mesh, PoseParams, ShapeParams};
use reshape_core::mapping::{attributes_to_beta, slider_state, AttributeEdit, AttributeVector, LinearAttributeMap};
use reshape_core::render::{render_conditioning_with, Camera, ConditioningImage};
use reshape_core::Exec;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::now_ms;
use crate::protocol::{request_digest, Attempt, BackendClient, BackendMetadata, GenerationParams};
use crate::store::Store;

/// An externally produced body fit. θ is the flat axis-angle vector, three
/// numbers per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub unix_ms: u64,
    pub fit: FitDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSource {
    /// β taken verbatim from `fits[fit]`.
    Fit,
    /// β from applying `edits` to the β of history entry `parent`.
    Sliders { parent: usize, edits: Vec<AttributeEdit> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub index: usize,
    pub unix_ms: u64,
    /// Which fit supplies θ and the camera.
    pub fit: usize,
    #[serde(flatten)]
    pub source: EditSource,
    pub beta: Vec<f64>,
    pub slider_state: AttributeVector,
    pub conditioning_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub unix_ms: u64,
    pub history_entry: usize,
    pub params: GenerationParams,
    pub request_digest: String,
    pub conditioning_sha256: String,
    pub attempts: Vec<Attempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Persisted editing session. `fits`, `history` and `generations` only
/// ever grow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub created_unix_ms: u64,
    pub reference: ImageRef,
    pub fits: Vec<FitRecord>,
    pub history: Vec<HistoryEntry>,
    pub generations: Vec<GenerationRecord>,
}

impl Project {
    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }

    pub fn entry(&self, index: Option<usize>) -> Result<&HistoryEntry> {
        match index {
            None => self.latest().ok_or_else(|| ServiceError::NoFit(self.id.clone())),
            Some(i) => self.history.get(i).ok_or(ServiceError::NoSuchEntry { index: i, len: self.history.len() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshPayload {
    pub entry: usize,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMismatch {
    pub entry: usize,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub entries: usize,
    pub mismatches: Vec<ReplayMismatch>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Project operations over a store. Writes to one project are serialized
/// through a per-project lock; different projects proceed independently.
pub struct Service {
    model: Arc<BodyModel>,
    map: Arc<LinearAttributeMap>,
    store: Store,
    backend: Option<BackendClient>,
    exec: Exec,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl Service {
    pub fn new(
        model: BodyModel,
        map: LinearAttributeMap,
        store: Store,
        backend: Option<BackendClient>,
    ) -> Result<Self> {
        map.validate()?;
        if map.num_betas != model.num_betas() {
            return Err(ServiceError::InvalidFit(format!(
                "attribute map has {} shape coefficients, body model {}",
                map.num_betas,
                model.num_betas()
            )));
        }
        Ok(Self {
            model: Arc::new(model),
            map: Arc::new(map),
            store,
            backend,
            exec: Exec::default(),
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &BodyModel {
        &self.model
    }

    pub fn map(&self) -> &LinearAttributeMap {
        &self.map
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn backend(&self) -> Option<&BackendClient> {
        self.backend.as_ref()
    }

    pub fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().expect("lock table").entry(id.to_string()).or_default().clone()
    }

    pub fn load(&self, id: &str) -> Result<Project> {
        self.store.load(id)
    }

    pub fn create_project(&self, reference: &[u8]) -> Result<Project> {
        let img = image::load_from_memory(reference).map_err(|e| ServiceError::Decode(e.to_string()))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let sha256 = self.store.put_blob(&id, reference, "png")?;
        let project = Project {
            id,
            created_unix_ms: now_ms(),
            reference: ImageRef { sha256, width: img.width(), height: img.height() },
            fits: Vec::new(),
            history: Vec::new(),
            generations: Vec::new(),
        };
        self.store.save(&project)?;
        Ok(project)
    }

    fn check_fit(&self, fit: &FitDocument) -> Result<PoseParams> {
        let bad = |m: String| Err(ServiceError::InvalidFit(m));
        if fit.beta.len() != self.model.num_betas() {
            return bad(format!("beta has {} entries, body model expects {}", fit.beta.len(), self.model.num_betas()));
        }
        if fit.theta.len() != 3 * self.model.num_joints() {
            return bad(format!(
                "theta has {} entries, body model expects {}",
                fit.theta.len(),
                3 * self.model.num_joints()
            ));
        }
        if fit.beta.iter().chain(&fit.theta).any(|x| !x.is_finite()) {
            return bad("beta and theta must be finite".into());
        }
        fit.camera.validate().map_err(|e| ServiceError::InvalidFit(e.to_string()))?;
        Ok(PoseParams::from_flat(&fit.theta)?)
    }

    fn render(&self, beta: &ShapeParams, fit: &FitDocument) -> Result<ConditioningImage> {
        let theta = PoseParams::from_flat(&fit.theta)?;
        Ok(render_conditioning_with(&self.model, beta, &theta, &fit.camera, self.exec)?)
    }

    fn push_entry(
        &self,
        project: &mut Project,
        fit: usize,
        source: EditSource,
        beta: ShapeParams,
    ) -> Result<(HistoryEntry, ConditioningImage)> {
        let slider_state = slider_state(&self.model, &self.map, &beta)?;
        let image = self.render(&beta, &project.fits[fit].fit)?;
        let conditioning_sha256 = self.store.put_blob(&project.id, &image.to_png()?, "png")?;
        let entry = HistoryEntry {
            index: project.history.len(),
            unix_ms: now_ms(),
            fit,
            source,
            beta: beta.0,
            slider_state,
            conditioning_sha256,
        };
        project.history.push(entry.clone());
        self.store.save(project)?;
        Ok((entry, image))
    }

    /// Adds a fit and a history entry holding its β. Earlier fits stay in
    /// the record.
    pub fn import_fit(&self, id: &str, fit: FitDocument) -> Result<HistoryEntry> {
        let lock = self.lock(id);
        let _guard = lock.blocking_lock();
        let mut project = self.store.load(id)?;
        self.check_fit(&fit)?;
        let beta = ShapeParams(fit.beta.clone());
        project.fits.push(FitRecord { unix_ms: now_ms(), fit });
        let fit = project.fits.len() - 1;
        Ok(self.push_entry(&mut project, fit, EditSource::Fit, beta)?.0)
    }

    /// Applies slider edits to the latest β. Pose and camera come from the
    /// same fit as the latest entry and are never changed here.
    pub fn apply_sliders(&self, id: &str, edits: &[AttributeEdit]) -> Result<(HistoryEntry, ConditioningImage)> {
        let lock = self.lock(id);
        let _guard = lock.blocking_lock();
        let mut project = self.store.load(id)?;
        let current = project.latest().ok_or_else(|| ServiceError::NoFit(id.into()))?.clone();
        let beta = attributes_to_beta(&self.model, &self.map, &ShapeParams(current.beta.clone()), edits)?;
        let source = EditSource::Sliders { parent: current.index, edits: edits.to_vec() };
        self.push_entry(&mut project, current.fit, source, beta)
    }

    pub fn conditioning_png(&self, id: &str, entry: Option<usize>) -> Result<Vec<u8>> {
        let project = self.store.load(id)?;
        let e = project.entry(entry)?;
        self.store.get_blob(id, &e.conditioning_sha256, "png")
    }

    pub fn reference_png(&self, id: &str) -> Result<Vec<u8>> {
        let project = self.store.load(id)?;
        self.store.get_blob(id, &project.reference.sha256, "png")
    }

    pub fn output_png(&self, id: &str, generation: usize) -> Result<Vec<u8>> {
        let project = self.store.load(id)?;
        let digest = project
            .generations
            .get(generation)
            .and_then(|g| g.output_sha256.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("{id}/generations/{generation}")))?;
        self.store.get_blob(id, &digest, "png")
    }

    /// Posed mesh of a history entry, for previews.
    pub fn mesh(&self, id: &str, entry: Option<usize>) -> Result<MeshPayload> {
        let project = self.store.load(id)?;
        let e = project.entry(entry)?;
        let theta = PoseParams::from_flat(&project.fits[e.fit].fit.theta)?;
        let Mesh { vertices, faces } = self.model.skin_with(&ShapeParams(e.beta.clone()), &theta, self.exec)?;
        Ok(MeshPayload { entry: e.index, vertices, faces })
    }

    /// Sends a history entry to the backend. The prompt is checked before
    /// anything goes over the network. Failed attempts are recorded in the
    /// project as well as returned.
    pub async fn request_generation(
        &self,
        id: &str,
        entry: Option<usize>,
        params: GenerationParams,
    ) -> Result<GenerationRecord> {
        params.validate()?;
        let backend = self.backend.as_ref().ok_or(ServiceError::NoBackend)?;
        let lock = self.lock(id);
        let _guard = lock.lock().await;
        let mut project = self.store.load(id)?;
        let e = project.entry(entry)?.clone();
        let reference = self.store.get_blob(id, &project.reference.sha256, "png")?;
        let conditioning = self.store.get_blob(id, &e.conditioning_sha256, "png")?;
        let digest = request_digest(&params, &reference, &conditioning);

        let (outcome, attempts) = backend.generate(&params, &reference, &conditioning).await;
        let outcome = outcome.and_then(|r| {
            if r.metadata.request_digest != digest {
                return Err(ServiceError::BadResponse(format!(
                    "backend digest {} does not match request digest {digest}",
                    r.metadata.request_digest
                )));
            }
            Ok(r)
        });
        let mut record = GenerationRecord {
            index: project.generations.len(),
            unix_ms: now_ms(),
            history_entry: e.index,
            params,
            request_digest: digest,
            conditioning_sha256: e.conditioning_sha256,
            attempts,
            output_sha256: None,
            backend: None,
            error: None,
        };
        let result = match outcome {
            Ok(r) => {
                record.output_sha256 = Some(self.store.put_blob(id, &r.image_png, "png")?);
                record.backend = Some(r.metadata);
                Ok(record.clone())
            }
            Err(err) => {
                record.error = Some(err.to_string());
                Err(err)
            }
        };
        project.generations.push(record);
        self.store.save(&project)?;
        result
    }

    /// Recomputes every history entry from its fit and recorded edits and
    /// compares β (bit for bit) and the conditioning image digest.
    pub fn replay(&self, id: &str) -> Result<ReplayReport> {
        let project = self.store.load(id)?;
        let mut betas: Vec<ShapeParams> = Vec::with_capacity(project.history.len());
        let mut mismatches = Vec::new();
        for e in &project.history {
            let fit = &project
                .fits
                .get(e.fit)
                .ok_or_else(|| ServiceError::Corrupt(format!("entry {} names missing fit {}", e.index, e.fit)))?
                .fit;
            let beta = match &e.source {
                EditSource::Fit => ShapeParams(fit.beta.clone()),
                EditSource::Sliders { parent, edits } => {
                    let base = betas
                        .get(*parent)
                        .ok_or_else(|| ServiceError::Corrupt(format!("entry {} has parent {parent}", e.index)))?;
                    attributes_to_beta(&self.model, &self.map, base, edits)?
                }
            };
            let same =
                beta.0.len() == e.beta.len() && beta.0.iter().zip(&e.beta).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatches
                    .push(ReplayMismatch { entry: e.index, what: format!("beta {:?} != stored {:?}", beta.0, e.beta) });
            }
            let png = self.render(&beta, fit)?.to_png()?;
            let digest = crate::store::sha256_hex(&png);
            if digest != e.conditioning_sha256 {
                mismatches.push(ReplayMismatch { entry: e.index, what: format!("conditioning {digest} != stored") });
            }
            betas.push(beta);
        }
        Ok(ReplayReport { entries: project.history.len(), mismatches })
    }
}
