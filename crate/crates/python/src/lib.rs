//! Python bindings for the privcase core crate.
//!
//! Images cross the boundary as nested lists of floats in `[0, 1]`, one
//! inner list per row.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use privcase::dataset::{self, SplitRatios, SynthSpec};
use privcase::evaluate::{self, ClassifierConfig, ClassifierState, Target};
use privcase::imaging::GrayImage;
use privcase::pprlvgan::{self, LatentCode};
use privcase::privatize::{self, BlurConfig, KSameConfig, PrivatizedImage, Sigma};
use privcase::Error;

pub fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        Error::Io { .. } | Error::Checkpoint(_) | Error::Image { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Row-major nested rows to an image; rows must be equally long and every
/// value must lie in `[0, 1]`.
pub fn image_from_rows(rows: &[Vec<f32>]) -> Result<GrayImage, Error> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::InvalidArgument("image rows differ in length".into()));
    }
    let img = GrayImage::new(h, w, rows.concat())?;
    if !img.in_unit_range() {
        return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
    }
    Ok(img)
}

pub fn image_to_rows(img: &GrayImage) -> Vec<Vec<f32>> {
    img.data().chunks(img.width().max(1)).map(<[f32]>::to_vec).collect()
}

#[pyclass(name = "Dataset", module = "privcase_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dataset::load_manifest(&manifest).map_err(to_py_err)?,
        })
    }

    /// Writes `dir/manifest.csv` and the images; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        dataset::save_manifest(&self.inner, &dir).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn identities(&self) -> Vec<u32> {
        self.inner.identities()
    }

    /// `(id, identity, pathology)` per sample.
    fn labels(&self) -> Vec<(String, u32, u8)> {
        self.inner
            .samples()
            .iter()
            .map(|s| (s.id.clone(), s.identity, s.pathology))
            .collect()
    }

    fn image(&self, index: usize) -> PyResult<Vec<Vec<f32>>> {
        self.inner
            .samples()
            .get(index)
            .map(|s| image_to_rows(&s.pixels))
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    #[pyo3(signature = (train = 0.65, val = 0.15, test = 0.20, seed = 42))]
    fn split(&self, train: f64, val: f64, test: f64, seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = dataset::split(&self.inner, SplitRatios { train, val, test }, seed).map_err(to_py_err)?;
        Ok((Self { inner: s.train }, Self { inner: s.val }, Self { inner: s.test }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} images, {} identities)",
            self.inner.len(),
            self.inner.n_identities()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n_identities = 20, images_per_identity = 20, resolution = 64, pathology_fraction = 0.3, seed = 42))]
fn synthesize(
    n_identities: usize,
    images_per_identity: usize,
    resolution: usize,
    pathology_fraction: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let spec = SynthSpec {
        n_identities,
        images_per_identity,
        resolution,
        pathology_fraction,
        ..SynthSpec::default()
    };
    Ok(PyDataset {
        inner: dataset::synthesize(&spec, seed).map_err(to_py_err)?,
    })
}

#[pyclass(name = "PrivatizedImage", module = "privcase_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyPrivatizedImage {
    inner: PrivatizedImage,
}

#[pymethods]
impl PyPrivatizedImage {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.as_str()
    }

    #[getter]
    fn pixels(&self) -> Vec<Vec<f32>> {
        image_to_rows(&self.inner.pixels)
    }

    #[getter]
    fn original_sample_id(&self) -> String {
        self.inner.original_sample_id.clone()
    }

    #[getter]
    fn original_identity(&self) -> u32 {
        self.inner.original_identity
    }

    #[getter]
    fn source_ids(&self) -> Vec<String> {
        self.inner.source_ids.clone()
    }

    #[getter]
    fn source_identities(&self) -> Vec<u32> {
        self.inner.source_identities.clone()
    }

    #[getter]
    fn replacement_identity(&self) -> Option<u32> {
        self.inner.replacement_identity
    }

    #[getter]
    fn params(&self) -> String {
        self.inner.params_string()
    }
}

fn wrap_items(items: Vec<PrivatizedImage>) -> Vec<PyPrivatizedImage> {
    items.into_iter().map(|inner| PyPrivatizedImage { inner }).collect()
}

fn unwrap_items(items: &[PyPrivatizedImage]) -> Vec<PrivatizedImage> {
    items.iter().map(|p| p.inner.clone()).collect()
}

#[pyfunction]
fn gaussian_kernel(size: usize, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    privatize::gaussian_kernel(size, sigma).map_err(to_py_err)
}

/// Blurs one image; `sigma=None` uses the kernel-size rule.
#[pyfunction]
#[pyo3(signature = (image, kernel_size, sigma = None))]
fn blur_image(image: Vec<Vec<f32>>, kernel_size: usize, sigma: Option<f64>) -> PyResult<Vec<Vec<f32>>> {
    let img = image_from_rows(&image).map_err(to_py_err)?;
    let cfg = BlurConfig {
        kernel_size,
        sigma: sigma.map_or(Sigma::AUTO, Sigma::Fixed),
    };
    Ok(image_to_rows(&privatize::blur_image(&img, &cfg).map_err(to_py_err)?))
}

#[pyfunction]
#[pyo3(signature = (dataset, kernel_size, sigma = None))]
fn blur_set(dataset: &PyDataset, kernel_size: usize, sigma: Option<f64>) -> PyResult<Vec<PyPrivatizedImage>> {
    let cfg = BlurConfig {
        kernel_size,
        sigma: sigma.map_or(Sigma::AUTO, Sigma::Fixed),
    };
    Ok(wrap_items(privatize::blur_set(&dataset.inner, &cfg).map_err(to_py_err)?))
}

#[pyfunction]
#[pyo3(signature = (dataset, k, seed = 0))]
fn k_same_select(dataset: &PyDataset, k: usize, seed: u64) -> PyResult<Vec<PyPrivatizedImage>> {
    let out = privatize::k_same_select(&dataset.inner, &KSameConfig::new(k), seed).map_err(to_py_err)?;
    Ok(wrap_items(out))
}

#[pyfunction]
fn verify_k_anonymity(items: Vec<PyPrivatizedImage>, k: usize) -> PyResult<bool> {
    Ok(privatize::verify_k_anonymity(&unwrap_items(&items), k)
        .map_err(to_py_err)?
        .pass)
}

#[pyfunction]
fn kl_divergence(mu: Vec<f32>, logvar: Vec<f32>) -> PyResult<f64> {
    let code = LatentCode { mu, logvar, z: None };
    pprlvgan::kl_divergence(&code).map_err(to_py_err)
}

#[pyfunction]
fn accuracy(predictions: Vec<u32>, labels: Vec<u32>) -> PyResult<f64> {
    evaluate::accuracy_of(&predictions, &labels).map_err(to_py_err)
}

#[pyfunction]
fn f1(predictions: Vec<bool>, labels: Vec<bool>) -> PyResult<f64> {
    evaluate::f1(&predictions, &labels).map_err(to_py_err)
}

#[pyclass(name = "Classifier", module = "privcase_py", frozen)]
pub struct PyClassifier {
    inner: ClassifierState,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: evaluate::load_classifier(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        evaluate::save_classifier(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn target(&self) -> &'static str {
        self.inner.target.as_str()
    }

    fn predict(&self, images: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<u32>> {
        let imgs = images
            .iter()
            .map(|i| image_from_rows(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py_err)?;
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        self.inner.predict(&refs).map_err(to_py_err)
    }

    /// Deep Taylor relevance of the predicted (or given) class.
    #[pyo3(signature = (image, class_index = None))]
    fn relevance(&self, image: Vec<Vec<f32>>, class_index: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
        let img = image_from_rows(&image).map_err(to_py_err)?;
        let map = evaluate::deep_taylor(&self.inner, &img, class_index).map_err(to_py_err)?;
        Ok(image_to_rows(&map.values))
    }
}

/// `target` is "identity" or "pathology".
#[pyfunction]
#[pyo3(signature = (train, val, target, epochs = 15, seed = 0))]
fn train_classifier(
    py: Python<'_>,
    train: &PyDataset,
    val: &PyDataset,
    target: &str,
    epochs: usize,
    seed: u64,
) -> PyResult<PyClassifier> {
    let target =
        Target::parse(target).ok_or_else(|| PyValueError::new_err(format!("unknown target `{target}`")))?;
    let cfg = ClassifierConfig {
        epochs,
        ..ClassifierConfig::default()
    };
    let (tr, va) = (&train.inner, &val.inner);
    let inner = py
        .detach(|| evaluate::train_classifier(tr, va, target, &cfg, seed))
        .map_err(to_py_err)?;
    Ok(PyClassifier { inner })
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("privcase".to_string()).chain(args).collect();
    py.detach(|| privcase::cli::main_with_args(argv))
}

#[pymodule]
fn privcase_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPrivatizedImage>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(blur_image, m)?)?;
    m.add_function(wrap_pyfunction!(blur_set, m)?)?;
    m.add_function(wrap_pyfunction!(k_same_select, m)?)?;
    m.add_function(wrap_pyfunction!(verify_k_anonymity, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(train_classifier, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
