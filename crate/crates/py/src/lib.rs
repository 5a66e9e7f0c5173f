//! Python bindings: box metrics, matching, synthetic scenes, AP evaluation
//! and a small detector wrapper.

use flowdet_core::data::{synth_generate, SynthSceneSpec};
use flowdet_core::detector::{
    build_model, count_flops, hungarian_match as match_costs, load_checkpoint, predict, save_checkpoint, AdamState,
    Model, ModelConfig,
};
use flowdet_core::eval::{self, Detection, GtBox};
use flowdet_core::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_from(text: Option<&str>) -> PyResult<ModelConfig> {
    match text {
        Some(t) => ModelConfig::from_toml(t).map_err(err),
        None => Ok(ModelConfig::default()),
    }
}

/// IoU of two `[x0, y0, x1, y1]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    eval::iou(&a, &b).map_err(err)
}

#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    eval::giou(&a, &b).map_err(err)
}

/// Minimum-cost assignment of rows to columns as `(row, col)` pairs.
#[pyfunction]
fn hungarian_match(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(err("cost matrix rows differ in length"));
    }
    let flat: Vec<f64> = cost.into_iter().flatten().collect();
    Ok(match_costs(&flat, rows, cols).map_err(err)?.pairs)
}

/// `(parameter count, analytic FLOPs)` of a configuration (TOML text; the
/// toy default when omitted).
#[pyfunction]
#[pyo3(signature = (config=None))]
fn model_summary(config: Option<&str>) -> PyResult<(usize, u64)> {
    let cfg = config_from(config)?;
    let params = build_model::<f32>(&cfg).map_err(err)?.param_count();
    Ok((params, count_flops(&cfg).total()))
}

/// One synthetic scene: flat `[3, H, W]` pixels and `(category_id, [x, y, w, h])` labels.
#[pyfunction]
#[pyo3(signature = (seed, height=64, width=64))]
fn synth_scene(seed: u64, height: usize, width: usize) -> PyResult<(Vec<f64>, Vec<(u64, [f64; 4])>)> {
    let spec = SynthSceneSpec {
        image_size: (height, width),
        seed,
        ..SynthSceneSpec::default()
    };
    let scene = synth_generate(&spec).map_err(err)?;
    let labels = scene.objects.iter().map(|o| (o.category_id, o.bbox)).collect();
    Ok((scene.image.data().to_vec(), labels))
}

/// AP report as JSON, from COCO results JSON and a JSON list of
/// `{image_id, category_id, bbox, area}` ground-truth boxes.
#[pyfunction]
fn evaluate(detections_json: &str, ground_truth_json: &str) -> PyResult<String> {
    let dets: Vec<Detection> = serde_json::from_str(detections_json).map_err(err)?;
    let gts: Vec<GtBox> = serde_json::from_str(ground_truth_json).map_err(err)?;
    let mut cats: Vec<u64> = gts.iter().map(|g| g.category_id).collect();
    cats.sort_unstable();
    cats.dedup();
    let rep = eval::ap_evaluate(&dets, &gts, &cats, &eval::AreaRanges::default()).map_err(err)?;
    serde_json::to_string(&rep).map_err(err)
}

#[pyclass]
struct Detector {
    model: Model<f32>,
}

#[pymethods]
impl Detector {
    /// Freshly initialized model from TOML text, or the toy default.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config)?;
        Ok(Self {
            model: build_model(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, _) = load_checkpoint(path, None).map_err(err)?;
        Ok(Self { model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.model, &AdamState::new(&self.model.store)).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn config(&self) -> String {
        self.model.cfg.to_toml()
    }

    /// One `(category_id, [x, y, w, h], score)` per query for a flat
    /// `[3, H, W]` image in `[0, 1]`.
    fn predict(&self, pixels: Vec<f64>) -> PyResult<Vec<(u64, [f64; 4], f64)>> {
        let (h, w) = self.model.cfg.input_size;
        let img = Tensor::<f32>::from_f64_slice(&[1, 3, h, w], &pixels).map_err(err)?;
        let sets = predict(&self.model, &img).map_err(err)?;
        Ok(sets[0]
            .to_detections(1, w as f64, h as f64)
            .into_iter()
            .map(|d| (d.category_id, d.bbox, d.score))
            .collect())
    }
}

#[pymodule]
fn flowdet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_match, m)?)?;
    m.add_function(wrap_pyfunction!(model_summary, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Detector>()?;
    Ok(())
}
