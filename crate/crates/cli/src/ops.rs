use crate::{CompositeArgs, EvalArgs, PlotArgs, PseudolabelArgs, SynthDataArgs, TrainArgs};
use cpgan_core::data::synth_sample;
use cpgan_core::error::{Error, Result};
use cpgan_core::tensor::Tensor;
use cpgan_core::trainer::{self, TrainConfig};
use std::path::Path;

pub fn train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {}", args.config.display(), e)))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    if let Some(steps) = args.steps {
        config.total_steps = steps;
    }
    if let Some(name) = args.run_name {
        config.run_name = name;
    }
    let run_dir = trainer::train(&config)?;
    println!("{}", run_dir.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let report = trainer::evaluate(&args.checkpoint, &args.data, args.seed)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match args.out {
        Some(path) => std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?,
        None => println!("{}", json),
    }
    Ok(())
}

fn decode_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", path.display(), e)))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, p) in img.pixels().enumerate() {
        data[i] = p.0[0] as f32 / 255.0;
        data[hw + i] = p.0[1] as f32 / 255.0;
        data[2 * hw + i] = p.0[2] as f32 / 255.0;
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

fn save_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (t.dim(2), t.dim(3));
    let hw = h * w;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            (t.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8,
            (t.data()[hw + i].clamp(0.0, 1.0) * 255.0).round() as u8,
            (t.data()[2 * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {}", path.display(), e)))
}

fn save_gray(data: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = data[y as usize * w + x as usize];
        image::Luma([if v > 0.5 { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {}", path.display(), e)))
}

pub fn pseudolabel(args: PseudolabelArgs) -> Result<()> {
    let mut paths: Vec<_> = std::fs::read_dir(&args.input)
        .map_err(|e| Error::io(&args.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no images found in {}",
            args.input.display()
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for path in paths {
        let img = match decode_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {}", path.display(), e);
                continue;
            }
        };
        let mask = trainer::pseudo_label_image(&img, args.seed)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let out_path = args.out.join(format!("{}.png", stem));
        save_gray(mask.data(), mask.dim(2), mask.dim(3), &out_path)?;
        println!("{}", out_path.display());
    }
    Ok(())
}

pub fn composite(args: CompositeArgs) -> Result<()> {
    let fg = decode_rgb(&args.fg)?;
    let bg = decode_rgb(&args.bg)?;
    let mask_img = image::open(&args.mask)
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", args.mask.display(), e)))?
        .into_luma8();
    let (h, w) = (fg.dim(2), fg.dim(3));
    if mask_img.width() as usize != w || mask_img.height() as usize != h {
        return Err(Error::ShapeMismatch {
            op: "composite",
            detail: format!(
                "mask is {}x{}, foreground is {}x{}",
                mask_img.width(),
                mask_img.height(),
                w,
                h
            ),
        });
    }
    let mask = Tensor::from_vec(
        &[1, 1, h, w],
        mask_img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
    )?;
    let out = cpgan_core::compositing::composite(&fg, &bg, &mask)?;
    save_rgb(&out, &args.out)
}

pub fn synth_data(args: SynthDataArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    if !cpgan_core::networks::SUPPORTED_RESOLUTIONS.contains(&args.resolution) {
        return Err(Error::Config(format!(
            "unsupported resolution {} (supported: {:?})",
            args.resolution,
            cpgan_core::networks::SUPPORTED_RESOLUTIONS
        )));
    }
    let fg_dir = args.out.join("foreground");
    let bg_dir = args.out.join("background");
    let mask_dir = args.out.join("masks");
    for d in [&fg_dir, &bg_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let res = args.resolution;
    for i in 0..args.count {
        let s = synth_sample(args.seed, i as u64, res);
        let name = format!("{:05}.png", i);
        let as4 = |t: &Tensor<f32>| {
            Tensor::from_vec(&[1, 3, res, res], t.data().to_vec()).expect("shape")
        };
        save_rgb(&as4(&s.foreground), &fg_dir.join(&name))?;
        save_rgb(&as4(&s.background), &bg_dir.join(&name))?;
        let gt = s.gt_mask.expect("synthetic has ground truth");
        save_gray(gt.data(), res, res, &mask_dir.join(&name))?;
    }
    println!("{}", args.out.display());
    Ok(())
}

pub fn plot(args: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.metrics).map_err(|e| Error::io(&args.metrics, e))?;
    let parsed = crate::plot::parse_metrics(&text)?;
    let img = crate::plot::render(&parsed);
    img.save_with_format(&args.out, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {}", args.out.display(), e)))?;
    Ok(())
}
