use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{softmax_rows, Checkpoint, LayerSpec, Sequential, Shape3};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::seed;

const INFERENCE_CHUNK: usize = 256;

/// Network families used for teachers and students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv(6, 5x5, pad 2) - pool - conv(16, 5x5) - pool - fc120 - fc84 - fcK, ReLU, max-pool.
    Lenet5,
    /// LeNet5 with half the channels and units per layer.
    Lenet5Half,
    /// Any explicit layer stack; the last layer must emit K features.
    Custom(Vec<LayerSpec>),
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lenet5" => Ok(Architecture::Lenet5),
            "lenet5_half" => Ok(Architecture::Lenet5Half),
            other => Err(Error::argument(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::Lenet5 => "lenet5",
            Architecture::Lenet5Half => "lenet5_half",
            Architecture::Custom(_) => "custom",
        }
    }

    pub fn layers(&self, input: Shape3, num_classes: usize) -> Result<Vec<LayerSpec>> {
        let (c1, c2, f1, f2) = match self {
            Architecture::Lenet5 => (6, 16, 120, 84),
            Architecture::Lenet5Half => (3, 8, 60, 42),
            Architecture::Custom(layers) => return Ok(layers.clone()),
        };
        let conv1 = LayerSpec::Conv2d { input, filters: c1, kernel: 5, padding: 2 };
        let s1 = conv1.output_shape().expect("conv");
        let pool1 = LayerSpec::MaxPool2d { input: s1 };
        let s2 = pool1.output_shape().expect("pool");
        if s2.0 < 5 || s2.1 < 5 {
            return Err(Error::argument(format!("input {input:?} too small for LeNet5")));
        }
        let conv2 = LayerSpec::Conv2d { input: s2, filters: c2, kernel: 5, padding: 0 };
        let s3 = conv2.output_shape().expect("conv");
        let pool2 = LayerSpec::MaxPool2d { input: s3 };
        let flat = pool2.output_width();
        Ok(vec![
            conv1,
            LayerSpec::Relu { width: s1.0 * s1.1 * s1.2 },
            pool1,
            conv2,
            LayerSpec::Relu { width: s3.0 * s3.1 * s3.2 },
            pool2,
            LayerSpec::Dense { inputs: flat, outputs: f1 },
            LayerSpec::Relu { width: f1 },
            LayerSpec::Dense { inputs: f1, outputs: f2 },
            LayerSpec::Relu { width: f2 },
            LayerSpec::Dense { inputs: f2, outputs: num_classes },
        ])
    }
}

/// An image classifier with a softmax head. The network itself emits logits.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    input_shape: Shape3,
    num_classes: usize,
    net: Sequential,
}

impl Classifier {
    pub fn new(arch: Architecture, input_shape: Shape3, num_classes: usize, seed: u64) -> Result<Self> {
        let specs = arch.layers(input_shape, num_classes)?;
        let net = Sequential::new(specs, &mut seed::rng_for(seed, "classifier-init"))?;
        Self::from_network(arch, input_shape, num_classes, net)
    }

    pub fn from_network(arch: Architecture, input_shape: Shape3, num_classes: usize, net: Sequential) -> Result<Self> {
        let (h, w, c) = input_shape;
        if net.input_width() != h * w * c {
            return Err(Error::consistency(format!(
                "network expects {} inputs, images have {}",
                net.input_width(),
                h * w * c
            )));
        }
        if net.output_width() != num_classes {
            return Err(Error::consistency(format!(
                "network emits {} logits for {num_classes} classes",
                net.output_width()
            )));
        }
        Ok(Self { arch, input_shape, num_classes, net })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn logits(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        self.net.forward(x)
    }

    /// Class probabilities for flat image rows, evaluated in fixed-size chunks.
    pub fn predict_proba_rows(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let n = x.nrows();
        let mut out = Array2::<f32>::zeros((n, self.num_classes));
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let p = softmax_rows(&self.logits(x.slice(ndarray::s![start..end, ..])));
            out.slice_mut(ndarray::s![start..end, ..]).assign(&p);
            start = end;
        }
        out
    }

    pub fn predict_proba(&self, images: &ImageSet) -> Result<Array2<f32>> {
        if images.image_shape() != self.input_shape {
            return Err(Error::argument(format!(
                "images are {:?}, classifier expects {:?}",
                images.image_shape(),
                self.input_shape
            )));
        }
        Ok(self.predict_proba_rows(images.rows()))
    }

    pub fn to_checkpoint(&self, config_echo: Option<&serde_json::Value>) -> Checkpoint {
        let mut c = Checkpoint::new("classifier");
        c.set_meta("architecture", self.arch.id());
        c.set_meta("layers", serde_json::to_string(self.net.specs()).expect("specs serialize"));
        c.set_meta("input_shape", serde_json::to_string(&self.input_shape).expect("shape"));
        c.set_meta("num_classes", self.num_classes.to_string());
        if let Some(cfg) = config_echo {
            c.set_meta("config", cfg.to_string());
        }
        self.net.write_to(&mut c, "");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != Some("classifier") {
            return Err(Error::consistency(format!("checkpoint kind {:?} is not a classifier", c.kind())));
        }
        let bad = |e: serde_json::Error| Error::consistency(format!("checkpoint metadata: {e}"));
        let specs: Vec<LayerSpec> = serde_json::from_str(c.meta("layers")?).map_err(bad)?;
        let input_shape: Shape3 = serde_json::from_str(c.meta("input_shape")?).map_err(bad)?;
        let num_classes: usize = c
            .meta("num_classes")?
            .parse()
            .map_err(|_| Error::consistency("num_classes is not an integer"))?;
        let arch = match c.meta("architecture")? {
            "custom" => Architecture::Custom(specs.clone()),
            id => Architecture::parse(id)?,
        };
        let net = Sequential::read_from(c, "", specs)?;
        Self::from_network(arch, input_shape, num_classes, net)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_echo: Option<&serde_json::Value>) -> Result<()> {
        self.to_checkpoint(config_echo).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
