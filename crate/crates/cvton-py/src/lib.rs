//! Python bindings for the try-on pipeline.
//!
//! Images cross the boundary as flat `list[float]` plus a shape tuple
//! (row-major, matching the core layout `[channels, height, width]`);
//! configs cross as TOML strings; reports cross as JSON strings.  Heavy
//! calls release the interpreter lock while the Rust side works.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cvton_core::data::{generate_toy_dataset, load_dataset, Pairing, ToySpec};
use cvton_core::error::Error;
use cvton_core::metrics::{fid_between_image_sets, lpips_pair, FeatureExtractor, Protocol};
use cvton_core::tps::{warp_image, TpsSolver, WarpParams, DEFAULT_RIDGE};
use cvton_core::train::{
    evaluate_testset, load_pipeline, train_bpgm, train_generator, Checkpoint, RunConfig,
};

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::Config(..) | Error::Shape(..) => PyValueError::new_err(e.to_string()),
        Error::Data(..) | Error::Io(..) => PyIOError::new_err(e.to_string()),
        Error::Numeric(..) | Error::Checkpoint(..) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_config(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut rc = match config_toml {
        Some(s) => RunConfig::from_toml_str(s).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    Ok(rc)
}

fn to_array(data: Vec<f64>, shape: &[usize]) -> PyResult<ArrayD<f64>> {
    let need: usize = shape.iter().product();
    if data.len() != need {
        return Err(PyValueError::new_err(format!(
            "got {} values but shape {:?} needs {}",
            data.len(),
            shape,
            need
        )));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length checked"))
}

fn flatten(a: ArrayD<f64>) -> Vec<f64> {
    a.into_iter().collect()
}

/// The default pipeline configuration as a TOML string.  Every field can
/// be overridden by passing an edited copy back through `config_toml`.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml_string()
}

/// Render a procedural try-on dataset under `out_dir` and return the
/// (train, test) sample counts.  `spec_toml` may set any subset of the
/// dataset knobs (resolution, counts, seed); `seed` overrides the seed.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_toml=None, seed=None))]
fn generate_dataset(
    py: Python<'_>,
    out_dir: &str,
    spec_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(usize, usize)> {
    let mut spec: ToySpec = match spec_toml {
        Some(s) => toml::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ToySpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = Path::new(out_dir).to_path_buf();
    py.detach(move || generate_toy_dataset(&spec, &out).map(|_| (spec.n_train, spec.n_test)))
        .map_err(to_py)
}

/// Train both stages on the train split of `data_root`: the geometric
/// matcher first, then the image generator on top of it.  Artifacts land
/// in `out_dir/matcher` and `out_dir/generator`.  Returns the path of
/// the final generator checkpoint plus the loss means of the evaluation
/// pass before training and of the last epoch.
#[pyfunction]
#[pyo3(signature = (data_root, out_dir, config_toml=None, seed=None))]
fn train_pipeline(
    py: Python<'_>,
    data_root: &str,
    out_dir: &str,
    config_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(String, BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let rc = parse_config(config_toml, seed)?;
    let epochs_g = rc.train.epochs_g;
    let ds = load_dataset(Path::new(data_root), "train", Pairing::Paired, rc.train.seed)
        .map_err(to_py)?;
    let out = Path::new(out_dir).to_path_buf();
    let run = py
        .detach(move || {
            let bpgm = train_bpgm(&rc.net, &rc.train, &ds, &out.join("matcher"))?;
            train_generator(
                &rc.net,
                &rc.train,
                &ds,
                Some(&bpgm.checkpoint),
                &out.join("generator"),
            )
        })
        .map_err(to_py)?;
    let ckpt = Path::new(out_dir)
        .join("generator")
        .join(format!("ckpt_{epochs_g}.ckpt"));
    let first = run.epoch_means.first().cloned().unwrap_or_default();
    let last = run.epoch_means.last().cloned().unwrap_or_default();
    Ok((ckpt.display().to_string(), first, last))
}

/// Dress sample `index` of the given split in the garment its pairing
/// assigns, using the checkpoint at `ckpt_path`.  Returns two images,
/// each as `(values, (channels, height, width))`: the generated result
/// and the warped garment that conditioned it.
#[pyfunction]
#[pyo3(signature = (ckpt_path, data_root, split="test", index=0, use_ema=false, config_toml=None))]
fn try_on(
    py: Python<'_>,
    ckpt_path: &str,
    data_root: &str,
    split: &str,
    index: usize,
    use_ema: bool,
    config_toml: Option<&str>,
) -> PyResult<(
    (Vec<f64>, (usize, usize, usize)),
    (Vec<f64>, (usize, usize, usize)),
)> {
    let rc = parse_config(config_toml, None)?;
    let ckpt = Checkpoint::load(Path::new(ckpt_path)).map_err(to_py)?;
    let ds = load_dataset(Path::new(data_root), split, Pairing::Paired, rc.train.seed)
        .map_err(to_py)?;
    if index >= ds.len() {
        return Err(PyValueError::new_err(format!(
            "index {index} out of range for {} samples",
            ds.len()
        )));
    }
    let (generated, warped) = py
        .detach(move || {
            let pipeline = load_pipeline(&rc.net, &ckpt)?;
            pipeline.infer_index(&rc.net, &ds, index, use_ema)
        })
        .map_err(to_py)?;
    let squeeze = |x: ArrayD<f64>| {
        let img = x.index_axis(Axis(0), 0).to_owned();
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        (flatten(img.into_dyn()), (c, h, w))
    };
    Ok((squeeze(generated), squeeze(warped)))
}

/// Score a checkpoint on a dataset split and return the report as a JSON
/// string.  `protocol` is "paired" (reconstruct the worn garment; both
/// distribution distance and per-pair perceptual distance) or "unpaired"
/// (swap garments between people; distribution distance only).
#[pyfunction]
#[pyo3(signature = (ckpt_path, data_root, split="test", protocol="paired", use_ema=false, config_toml=None, seed=None))]
fn evaluate(
    py: Python<'_>,
    ckpt_path: &str,
    data_root: &str,
    split: &str,
    protocol: &str,
    use_ema: bool,
    config_toml: Option<&str>,
    seed: Option<u64>,
) -> PyResult<String> {
    let rc = parse_config(config_toml, seed)?;
    let protocol: Protocol = protocol.parse().map_err(to_py)?;
    let pairing = match protocol {
        Protocol::Paired => Pairing::Paired,
        Protocol::Unpaired => Pairing::Shuffled,
    };
    let ckpt = Checkpoint::load(Path::new(ckpt_path)).map_err(to_py)?;
    let ds = load_dataset(Path::new(data_root), split, pairing, rc.train.seed).map_err(to_py)?;
    let report = py
        .detach(move || evaluate_testset(&rc.net, &ckpt, &ds, protocol, rc.train.seed, use_ema))
        .map_err(to_py)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Warp one image with a thin-plate spline driven by a `points` by
/// `points` lattice of control offsets.  `offsets` holds the x offsets
/// for every control point and then the y offsets, in normalized units
/// where 1.0 spans half the image; all zeros reproduce the input
/// exactly.  Returns `(values, shape)` like the input.
#[pyfunction]
#[pyo3(signature = (image, shape, offsets, points))]
fn warp(
    image: Vec<f64>,
    shape: (usize, usize, usize),
    offsets: Vec<f64>,
    points: usize,
) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
    let (c, h, w) = shape;
    let img = to_array(image, &[1, c, h, w])?;
    let theta = to_array(offsets, &[1, 2 * points * points])?;
    let solver = TpsSolver::new(points, h, w, DEFAULT_RIDGE).map_err(to_py)?;
    let grid = solver.solve(&WarpParams(theta));
    let out = warp_image(&img, &grid);
    Ok((flatten(out.index_axis(Axis(0), 0).to_owned().into_dyn()), shape))
}

/// Perceptual distance between two images of shape `(3, height, width)`
/// under the procedurally seeded feature extractor (0 means identical;
/// numbers are comparable only within one extractor configuration).
#[pyfunction]
#[pyo3(signature = (a, b, shape, config_toml=None))]
fn lpips(
    a: Vec<f64>,
    b: Vec<f64>,
    shape: (usize, usize, usize),
    config_toml: Option<&str>,
) -> PyResult<f64> {
    let rc = parse_config(config_toml, None)?;
    let (c, h, w) = shape;
    if c != 3 {
        return Err(PyValueError::new_err("images must have 3 channels"));
    }
    let step = 1usize << (rc.net.feat_stages - 1);
    if h % step != 0 || w % step != 0 {
        return Err(PyValueError::new_err(format!(
            "height and width must be multiples of {step} for this extractor"
        )));
    }
    let xa = to_array(a, &[c, h, w])?;
    let xb = to_array(b, &[c, h, w])?;
    let fx = FeatureExtractor::new(&rc.net);
    Ok(lpips_pair(&fx, &xa, &xb))
}

/// Distribution distance between two image sets, each passed as a flat
/// vector with shape `(n, 3, height, width)` and `n >= 2`.  0 means the
/// sets have identical embedding statistics.
#[pyfunction]
#[pyo3(signature = (a, a_shape, b, b_shape, config_toml=None))]
fn fid(
    py: Python<'_>,
    a: Vec<f64>,
    a_shape: (usize, usize, usize, usize),
    b: Vec<f64>,
    b_shape: (usize, usize, usize, usize),
    config_toml: Option<&str>,
) -> PyResult<f64> {
    let rc = parse_config(config_toml, None)?;
    let xa = to_array(a, &[a_shape.0, a_shape.1, a_shape.2, a_shape.3])?;
    let xb = to_array(b, &[b_shape.0, b_shape.1, b_shape.2, b_shape.3])?;
    py.detach(move || {
        let fx = FeatureExtractor::new(&rc.net);
        fid_between_image_sets(&fx, &xa, &xb)
    })
    .map_err(to_py)
}

/// Virtual try-on pipeline: procedural data, two-stage training,
/// inference, and evaluation metrics.
#[pymodule]
fn cvton_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(try_on, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(lpips, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    Ok(())
}
