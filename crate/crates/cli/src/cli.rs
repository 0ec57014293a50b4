//! Command-line front end: synthetic data generation, precompute, density
//! images, offline rendering and the HTTP service.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cipvol_core::classify::TransferFunctionSet;
use cipvol_core::density::{encode_png, tone_map};
use cipvol_core::pipeline::{classify_and_render, load_cached, precompute, PipelineParams, CACHE_ENV};
use cipvol_core::render::{Camera, RenderParams, Shading};
use cipvol_core::synthetic::{a3_preset_tf, gen_synthetic, preset};
use cipvol_core::volume::{load_volume, write_raw_f32, DatasetDescriptor, RawAttribute};
use clap::{Args, Parser, Subcommand};

use crate::service;

#[derive(Parser, Debug)]
#[command(name = "cipvol", version, about = "Continuous indexed points for multivariate volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (raw files, labels, descriptor).
    GenSynthetic {
        #[arg(long, default_value = "a3")]
        preset: String,
        /// Voxels per axis.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run octree, fitting, indexed points and density stages into the cache.
    Precompute {
        #[command(flatten)]
        common: Common,
    },
    /// Write a tone-mapped density image (and optionally the float buffer).
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        subspace: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw float buffer here.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Classify with a transfer-function file and ray cast to a PNG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Transfer-function JSON; an empty file means no brushes.
        #[arg(long)]
        tf: PathBuf,
        /// Camera JSON; defaults to an oblique view of the whole volume.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        width: u32,
        #[arg(long, default_value_t = 512)]
        height: u32,
        #[arg(long, default_value_t = 1.0)]
        sampling_rate: f64,
        #[arg(long, value_enum, default_value = "occlusion")]
        shading: ShadingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Datasets to preload, as `id=descriptor.json`.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        #[arg(long, env = CACHE_ENV)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ShadingArg {
    Occlusion,
    Phong,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Dataset descriptor JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pipeline parameters JSON; flags below override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub t_s: Option<f64>,
    #[arg(long)]
    pub t_e: Option<f64>,
    #[arg(long)]
    pub halfwidth: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated attribute order.
    #[arg(long, value_delimiter = ',')]
    pub axis_order: Option<Vec<usize>>,
    #[arg(long)]
    pub no_2flat: bool,
    #[arg(long)]
    pub per_voxel: bool,
    #[arg(long, env = CACHE_ENV, default_value = ".cipvol-cache")]
    pub cache_dir: PathBuf,
}

impl Common {
    pub fn pipeline_params(&self) -> Result<PipelineParams> {
        let mut p = match &self.params {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => PipelineParams::default(),
        };
        if let Some(v) = self.t_s {
            p.t_s = v;
        }
        if let Some(v) = self.t_e {
            p.t_e = v;
        }
        if let Some(v) = self.halfwidth {
            p.halfwidth = v;
        }
        if let Some(v) = self.n_samples {
            p.n_samples = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(o) = &self.axis_order {
            p.axis_order = Some(o.clone());
        }
        if self.no_2flat {
            p.do2flat = false;
        }
        if self.per_voxel {
            p.per_voxel = true;
        }
        Ok(p)
    }
}

pub fn read_tf(path: &Path) -> Result<TransferFunctionSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(TransferFunctionSet::default());
    }
    Ok(TransferFunctionSet::from_json(&text)?)
}

pub fn gen_synthetic_files(name: &str, size: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    let Some(spec) = preset(name, [size; 3]) else {
        bail!("unknown preset `{name}` (known: a3, a3-smooth)");
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (vol, labels) = gen_synthetic(&spec, seed)?;
    let mut attributes = Vec::new();
    for (i, a) in vol.attributes().iter().enumerate() {
        let file = format!("{}.raw", a.name);
        write_raw_f32(&out.join(&file), vol.attr(i))?;
        attributes.push(RawAttribute {
            name: a.name.clone(),
            path: file.into(),
        });
    }
    let label_bytes: Vec<u8> = labels.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(out.join("labels.u16"), label_bytes)?;
    let desc = DatasetDescriptor {
        dims: Some(vol.dims()),
        spacing: vol.spacing(),
        element_type: "f32le".into(),
        attributes,
        gradient_magnitude_of: Vec::new(),
        synthetic: None,
    };
    let path = out.join("descriptor.json");
    fs::write(&path, serde_json::to_string_pretty(&desc)?)?;
    if name.starts_with("a3") {
        fs::write(out.join("tf-a3.json"), a3_preset_tf(7f64.to_radians(), 0.15, 0.1).to_json())?;
    }
    Ok(path)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { preset, size, seed, out } => {
            let p = gen_synthetic_files(&preset, size, seed, &out)?;
            println!("{}", p.display());
        }
        Command::Precompute { common } => {
            let params = common.pipeline_params()?;
            let vol = load_volume(&common.dataset)?;
            let pre = precompute(&vol, &params, Some(&common.cache_dir), &|stage| tracing::info!(stage, "precompute"))?;
            let summary = serde_json::json!({
                "cache_dir": common.cache_dir,
                "work": pre.work,
                "manifest": pre.manifest,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Density {
            common,
            subspace,
            gamma,
            out,
            raw,
        } => {
            let params = common.pipeline_params()?;
            let vol = load_volume(&common.dataset)?;
            let pre = load_cached(&vol, &params, &common.cache_dir)?;
            let Some(buf) = pre.densities.get(subspace) else {
                bail!("subspace {subspace} out of range (0..{})", pre.densities.len());
            };
            fs::write(&out, encode_png(&tone_map(buf, gamma)?)?)?;
            if let Some(r) = raw {
                fs::write(r, buf.to_bytes())?;
            }
            println!("{}", buf.content_hash());
        }
        Command::Render {
            common,
            tf,
            camera,
            width,
            height,
            sampling_rate,
            shading,
            out,
        } => {
            let params = common.pipeline_params()?;
            let tf = read_tf(&tf)?;
            let vol = load_volume(&common.dataset)?;
            let cam = match camera {
                Some(p) => serde_json::from_str::<Camera>(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => Camera::default_for(vol.grid(), width, height),
            };
            let render = RenderParams {
                sampling_rate,
                shading: match shading {
                    ShadingArg::Occlusion => Shading::DirectionalOcclusion,
                    ShadingArg::Phong => Shading::Phong,
                },
                ..Default::default()
            };
            render.validate()?;
            cam.basis()?;
            let pre = load_cached(&vol, &params, &common.cache_dir)?;
            let (_, img) = classify_and_render(&vol, &pre, &tf, &cam, &render)?;
            fs::write(&out, encode_png(&img)?)?;
        }
        Command::Serve { addr, datasets, cache_dir } => {
            let state = service::AppState::new(cache_dir);
            for d in datasets {
                let Some((id, path)) = d.split_once('=') else {
                    bail!("--dataset expects id=descriptor.json, got `{d}`");
                };
                state.insert(id, load_volume(Path::new(path))?);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, service::router(state)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}
