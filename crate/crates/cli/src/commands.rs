use std::path::{Path, PathBuf};

use lucid_core::flow::{backward_name, forward_name, read_flo, synth_flow, write_flo, FlowDir};
use lucid_core::net::{micro_spec, save_weights};
use lucid_core::pipeline::{dream_image, process_video, required_flow_pairs};
use lucid_core::ppm::{load_ppm, save_ppm, PpmImage};
use lucid_core::{Network, SynthFlow, Tensor, Weights};

use crate::config::{read_config, RunConfig};
use crate::error::{CliError, CliResult};
use crate::RunArgs;

fn resolve(default_preset: &str, args: &RunArgs) -> CliResult<RunConfig> {
    let file = match &args.config {
        Some(path) => read_config(path)?,
        None => Vec::new(),
    };
    RunConfig::resolve(default_preset, &file, &args.entries())
}

fn load_network(cfg: &RunConfig) -> CliResult<Network> {
    let spec = RunConfig::require(&cfg.network, "network")?;
    let weights = RunConfig::require(&cfg.weights, "weights")?;
    Ok(Network::load(&spec, &weights)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::from(e).with_context(&format!("writing {}", path.display()))
    })
}

impl CliError {
    fn with_context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

pub fn dream(input: &Path, manifest: Option<&Path>, args: &RunArgs) -> CliResult<()> {
    let cfg = resolve("per_frame", args)?;
    let out = RunConfig::require(&cfg.out, "out")?;
    let net = load_network(&cfg)?;
    let image = load_ppm(input)?.to_tensor();
    let (result, m) = dream_image(&net, &image, &cfg.settings)?;
    save_ppm(&PpmImage::from_tensor(&result)?, &out)?;
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("json"));
    write_text(&manifest_path, &m.to_json())?;
    log::info!("wrote {} and {}", out.display(), manifest_path.display());
    Ok(())
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.ppm")
}

/// Frame files `frame_0001.ppm, frame_0002.ppm, ...` in `dir`; gaps in the
/// numbering are reported as missing inputs.
pub fn discover_frames(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|_| CliError::missing(format!("frames directory {}", dir.display())))?;
    let mut numbers = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        let number = name
            .strip_prefix("frame_")
            .and_then(|rest| rest.strip_suffix(".ppm"))
            .and_then(|digits| digits.parse::<usize>().ok());
        if let Some(n) = number.filter(|&n| n > 0) {
            numbers.push(n);
        }
    }
    numbers.sort_unstable();
    let Some(&last) = numbers.last() else {
        return Err(CliError::missing(format!(
            "no frame_NNNN.ppm files in {}",
            dir.display()
        )));
    };
    let missing: Vec<String> = (1..=last)
        .filter(|n| numbers.binary_search(n).is_err())
        .map(frame_name)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::missing(format!("missing frames: {}", missing.join(", "))));
    }
    Ok((1..=last).map(|n| dir.join(frame_name(n))).collect())
}

pub fn dream_video(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve("short_term", args)?;
    let frames_dir = RunConfig::require(&cfg.frames, "frames")?;
    let out = RunConfig::require(&cfg.out, "out")?;
    let paths = discover_frames(&frames_dir)?;
    let flows = match &cfg.flows {
        Some(dir) => FlowDir::new(dir),
        None if paths.len() == 1 => FlowDir::new(&frames_dir),
        None => return Err(CliError::validation("`--flows` is required for more than one frame")),
    };
    let mut missing = Vec::new();
    for (earlier, later) in required_flow_pairs(&cfg.settings.preset, paths.len()) {
        for path in [flows.forward_path(earlier, later), flows.backward_path(earlier, later)] {
            if !path.is_file() {
                missing.push(
                    path.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::missing(format!("missing flow files: {}", missing.join(", "))));
    }
    let net = load_network(&cfg)?;
    let frames = paths
        .iter()
        .map(|p| Ok(load_ppm(p)?.to_tensor()))
        .collect::<CliResult<Vec<Tensor>>>()?;
    let result = process_video(&net, &frames, &flows, &cfg.settings)?;
    std::fs::create_dir_all(&out)?;
    for (i, frame) in result.frames.iter().enumerate() {
        save_ppm(&PpmImage::from_tensor(frame)?, &out.join(frame_name(i + 1)))?;
    }
    write_text(&out.join("manifest.json"), &result.manifest.to_json())?;
    log::info!(
        "wrote {} frames ({} shot changes) to {}",
        result.frames.len(),
        result.manifest.shot_changes,
        out.display()
    );
    Ok(())
}

pub fn flow_inspect(file: &Path) -> CliResult<()> {
    let s = read_flo(file)?.stats();
    println!("size: {}x{}", s.width, s.height);
    println!("u: min {} max {} mean {}", s.u_min, s.u_max, s.u_mean);
    println!("v: min {} max {} mean {}", s.v_min, s.v_max, s.v_mean);
    Ok(())
}

fn scaled(motion: SynthFlow, offset: usize) -> SynthFlow {
    let k = offset as f32;
    match motion {
        SynthFlow::Translation { dx, dy } => SynthFlow::Translation {
            dx: dx * k,
            dy: dy * k,
        },
        SynthFlow::Rotation { radians } => SynthFlow::Rotation { radians: radians * k },
    }
}

pub fn flow_synth(
    motion: SynthFlow,
    height: usize,
    width: usize,
    frames: usize,
    max_offset: usize,
    out: &Path,
) -> CliResult<()> {
    if height == 0 || width == 0 {
        return Err(CliError::validation("flow dimensions must be positive"));
    }
    if frames < 2 || max_offset == 0 {
        return Err(CliError::validation("need at least two frames and a positive offset"));
    }
    std::fs::create_dir_all(out)?;
    for later in 2..=frames {
        for offset in 1..=max_offset.min(later - 1) {
            let earlier = later - offset;
            let (fwd, bwd) = synth_flow(scaled(motion, offset), height, width);
            std::fs::write(out.join(forward_name(earlier, later)), write_flo(&fwd))?;
            std::fs::write(out.join(backward_name(earlier, later)), write_flo(&bwd))?;
        }
    }
    Ok(())
}

pub fn init_weights(
    spec_path: &Path,
    weights_path: &Path,
    size: usize,
    conv1: usize,
    conv2: usize,
    classes: usize,
    seed: u64,
) -> CliResult<()> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(CliError::validation(format!("--size must be a positive multiple of 4, got {size}")));
    }
    if conv1 == 0 || conv2 == 0 || classes == 0 {
        return Err(CliError::validation("channel and class counts must be positive"));
    }
    let spec = micro_spec(size, conv1, conv2, classes);
    let weights = Weights::random(&spec, seed);
    spec.write(spec_path)?;
    save_weights(&spec, &weights, weights_path)?;
    println!(
        "{} parameters, input {size}x{size}, {classes} classes",
        spec.parameter_count()
    );
    Ok(())
}
