//! Flat key-value run configuration: `key = value` lines grouped under
//! bracketed `[section]` headers, `#` comments. The original text is kept and
//! echoed verbatim into every output directory so a run's inputs are always
//! recoverable.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::SyntheticSpec;
use crate::htl::HtlConfig;
use crate::model::ModelConfig;
use crate::trainer::OptimConfig;
use crate::{invalid, Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    raw: String,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                invalid(format!("config line {}: expected key = value", lineno + 1))
            })?;
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config {
            sections,
            raw: text.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        Config::parse(&text)
    }

    /// The untouched input text.
    pub fn echo(&self) -> &str {
        &self.raw
    }

    /// Copy the config verbatim into an output directory.
    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
        std::fs::write(out_dir.join("config.txt"), &self.raw).map_err(Error::Io)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    fn get_parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                invalid(format!("config [{section}] {key}: cannot parse {raw:?}"))
            }),
        }
    }

    /// Overlay `[optim]` keys onto defaults.
    pub fn optim(&self, defaults: OptimConfig) -> Result<OptimConfig> {
        let mut c = defaults;
        let s = "optim";
        if let Some(v) = self.get_parsed(s, "base_lr")? {
            c.base_lr = v;
        }
        if let Some(v) = self.get_parsed(s, "final_lr")? {
            c.final_lr = v;
        }
        if let Some(v) = self.get_parsed(s, "beta1")? {
            c.beta1 = v;
        }
        if let Some(v) = self.get_parsed(s, "beta2")? {
            c.beta2 = v;
        }
        if let Some(v) = self.get_parsed(s, "weight_decay")? {
            c.weight_decay = v;
        }
        if let Some(v) = self.get_parsed(s, "max_epochs")? {
            c.max_epochs = v;
        }
        if let Some(v) = self.get_parsed(s, "batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = self.get_parsed(s, "grad_clip_norm")? {
            c.grad_clip_norm = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Overlay `[data]` keys onto defaults (the class-to-reliable-modality
    /// map keeps the generator's default subset cycle).
    pub fn data(&self, defaults: SyntheticSpec) -> Result<SyntheticSpec> {
        let mut c = defaults;
        let s = "data";
        if let Some(v) = self.get_parsed::<usize>(s, "num_classes")? {
            // rebuild the per-class reliable sets for the new class count
            let seed = c.seed;
            let spc = c.samples_per_class;
            let template = SyntheticSpec::toy(v, spc, seed);
            c.num_classes = v;
            c.reliable_map = template.reliable_map;
        }
        if let Some(v) = self.get_parsed(s, "samples_per_class")? {
            c.samples_per_class = v;
        }
        if let Some(v) = self.get_parsed(s, "corruption_prob")? {
            c.corruption_prob = v;
        }
        if let Some(v) = self.get_parsed(s, "noise_std")? {
            c.noise_std = v;
        }
        if let Some(v) = self.get_parsed(s, "signal_amp")? {
            c.signal_amp = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Overlay `[model]` and `[htl]` keys onto defaults.
    pub fn model(&self, defaults: ModelConfig) -> Result<ModelConfig> {
        let mut c = defaults;
        let s = "model";
        if let Some(v) = self.get_parsed::<usize>(s, "embed_dim")? {
            for m in c.modalities.iter_mut() {
                m.embed_dim = v;
            }
        }
        if let Some(v) = self.get_parsed::<usize>(s, "num_blocks")? {
            for m in c.modalities.iter_mut() {
                m.num_blocks = v;
            }
        }
        if let Some(v) = self.get_parsed::<usize>(s, "num_heads")? {
            for m in c.modalities.iter_mut() {
                m.num_heads = v;
            }
        }
        c.htl = self.htl(c.htl)?;
        c.validate()?;
        Ok(c)
    }

    pub fn htl(&self, defaults: HtlConfig) -> Result<HtlConfig> {
        let mut c = defaults;
        let s = "htl";
        if let Some(v) = self.get_parsed(s, "alpha")? {
            c.alpha = v;
        }
        if let Some(v) = self.get_parsed(s, "beta")? {
            c.beta = v;
        }
        if let Some(v) = self.get_parsed(s, "temperature")? {
            c.temperature = v;
        }
        if let Some(v) = self.get_parsed(s, "detach_teacher")? {
            c.detach_teacher = v;
        }
        Ok(c)
    }
}
