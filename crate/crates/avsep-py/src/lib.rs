//! Python bindings for the avsep core crate.
//!
//! Exposes the DSP pipeline, synthetic corpus generation, bss_eval scoring,
//! mask fusion, and trained-model inference. Arrays cross the boundary as
//! flat `Vec<f64>` plus a shape tuple to keep the dependency surface small.

use std::path::Path;

use ndarray::{Array1, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use avsep::dsp::{self, AudioClip, FreqMap};
use avsep::separation::{self, Conditioning, Model};
use avsep::synthdata;

fn err(e: avsep::AvsepError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A mono audio clip with an explicit sample rate.
#[pyclass(name = "Clip", from_py_object)]
#[derive(Clone)]
struct PyClip {
    inner: AudioClip,
}

#[pymethods]
impl PyClip {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(PyClip {
            inner: AudioClip::new(samples, sample_rate).map_err(err)?,
        })
    }

    fn samples(&self) -> Vec<f64> {
        self.inner.samples().to_vec()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dsp::write_wav(Path::new(path), &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyClip {
            inner: dsp::read_wav(Path::new(path)).map_err(err)?,
        })
    }
}

/// STFT magnitude of a clip: (flat row-major data, (freq_bins, frames)).
#[pyfunction]
fn stft_magnitude(clip: &PyClip) -> PyResult<(Vec<f64>, (usize, usize))> {
    let spec = dsp::stft(&dsp::prepare_clip(&clip.inner)).map_err(err)?;
    let mag = spec.magnitude();
    let dim = mag.dim();
    Ok((mag.into_raw_vec_and_offset().0, dim))
}

/// Log-frequency magnitude grid log(1+|S|): (flat data, (256, 256)).
#[pyfunction]
fn log_spectrogram(clip: &PyClip) -> PyResult<(Vec<f64>, (usize, usize))> {
    let spec = dsp::stft(&dsp::prepare_clip(&clip.inner)).map_err(err)?;
    let log = dsp::to_log_spec(&spec, &FreqMap::new()).map_err(err)?;
    let comp = log.compressed();
    let dim = comp.dim();
    Ok((comp.into_raw_vec_and_offset().0, dim))
}

/// istft(stft(x)) round trip at the standard length (diagnostic).
#[pyfunction]
fn round_trip(clip: &PyClip) -> PyResult<PyClip> {
    let prepared = dsp::prepare_clip(&clip.inner);
    let spec = dsp::stft(&prepared).map_err(err)?;
    Ok(PyClip {
        inner: dsp::istft(&spec, prepared.len()).map_err(err)?,
    })
}

/// Synthesize one toy-corpus clip for `category` (seeded, deterministic).
#[pyfunction]
#[pyo3(signature = (category, seed, n_categories = 4))]
fn synth_clip(category: usize, seed: u64, n_categories: usize) -> PyResult<PyClip> {
    let cats = synthdata::default_categories(n_categories).map_err(err)?;
    let cat = cats
        .get(category)
        .ok_or_else(|| err(avsep::AvsepError::UnknownCategory(category)))?;
    Ok(PyClip {
        inner: synthdata::synth_audio(cat, seed, dsp::CLIP_SECONDS).map_err(err)?,
    })
}

/// Render one toy image: (flat CHW data, (3, size, size), (x0, y0, x1, y1)).
#[pyfunction]
#[pyo3(signature = (category, seed, size = 64, n_categories = 4))]
fn render_image(
    category: usize,
    seed: u64,
    size: usize,
    n_categories: usize,
) -> PyResult<(Vec<f64>, (usize, usize, usize), (usize, usize, usize, usize))> {
    let cats = synthdata::default_categories(n_categories).map_err(err)?;
    let cat = cats
        .get(category)
        .ok_or_else(|| err(avsep::AvsepError::UnknownCategory(category)))?;
    let (img, bbox) = synthdata::render_image(cat, seed, size);
    let dim = img.dim();
    Ok((
        img.into_raw_vec_and_offset().0,
        dim,
        (bbox.x0, bbox.y0, bbox.x1, bbox.y1),
    ))
}

/// Generate a corpus on disk from a JSON config object.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = "{}", overwrite = false))]
fn make_corpus(out_dir: &str, config_json: &str, overwrite: bool) -> PyResult<usize> {
    let config: synthdata::CorpusConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let corpus = synthdata::make_corpus(&config, Path::new(out_dir), overwrite).map_err(err)?;
    Ok(corpus.rows.len())
}

/// bss_eval scores of `estimate` against references (target first):
/// returns (sdr, sir, sar) in dB.
#[pyfunction]
fn bss_eval(estimate: Vec<f64>, references: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let refs: Vec<&[f64]> = references.iter().map(|r| r.as_slice()).collect();
    let s = avsep::metrics::score_estimate(&estimate, &refs).map_err(err)?;
    Ok((s.sdr, s.sir, s.sar))
}

/// Channel-weighted mask fusion (Eq. 1): (soft flat, binary flat, (h, w)).
#[pyfunction]
fn fuse(
    e: Vec<f64>,
    sound: Vec<f64>,
    shape: (usize, usize, usize),
) -> PyResult<(Vec<f64>, Vec<f64>, (usize, usize))> {
    let (k, h, w) = shape;
    if sound.len() != k * h * w {
        return Err(PyValueError::new_err(format!(
            "sound length {} does not match shape {:?}",
            sound.len(),
            shape
        )));
    }
    let e = Array1::from(e);
    let sound = Array3::from_shape_vec((k, h, w), sound)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let pair = separation::fuse(&e, &sound).map_err(err)?;
    Ok((
        pair.soft.into_raw_vec_and_offset().0,
        pair.binary.into_raw_vec_and_offset().0,
        (h, w),
    ))
}

/// A trained separation model loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::load(Path::new(path)).map_err(err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.name().to_string()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// Separate the source of `category` out of `mixture`.
    fn separate_by_category(&self, mixture: &PyClip, category: usize) -> PyResult<PyClip> {
        let out = separation::separate(&self.inner, Conditioning::Category(category), &mixture.inner)
            .map_err(err)?;
        Ok(PyClip { inner: out.estimate })
    }

    /// Separate the source shown in a CHW image out of `mixture`.
    fn separate_by_image(
        &self,
        mixture: &PyClip,
        image: Vec<f64>,
        shape: (usize, usize, usize),
    ) -> PyResult<PyClip> {
        let img = Array3::from_shape_vec(shape, image)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let out = separation::separate(&self.inner, Conditioning::Image(&img), &mixture.inner)
            .map_err(err)?;
        Ok(PyClip { inner: out.estimate })
    }
}

#[pymodule]
fn avsep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", dsp::SAMPLE_RATE)?;
    m.add("WINDOW_SIZE", dsp::WINDOW_SIZE)?;
    m.add("HOP", dsp::HOP)?;
    m.add("FREQ_BINS", dsp::FREQ_BINS)?;
    m.add("LOG_BINS", dsp::LOG_BINS)?;
    m.add("FRAMES", dsp::FRAMES)?;
    m.add_class::<PyClip>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(stft_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(log_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(render_image, m)?)?;
    m.add_function(wrap_pyfunction!(make_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(bss_eval, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    Ok(())
}
