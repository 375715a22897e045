//! Minimal deterministic plotting for metrics CSVs: loss curves, the FID
//! trajectory, and a lambda-over-time strip, rendered straight into a PNG.

use cpgan_core::error::{Error, Result};
use image::{Rgb, RgbImage};

pub struct Metrics {
    pub steps: Vec<f64>,
    pub loss_d: Vec<f64>,
    pub loss_g: Vec<f64>,
    pub loss_ss: Vec<f64>,
    pub lambda: Vec<f64>,
    /// (step, value) pairs for rows that carried an eval
    pub fid: Vec<(f64, f64)>,
    pub miou: Vec<(f64, f64)>,
}

pub fn parse_metrics(text: &str) -> Result<Metrics> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("metrics file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Data(format!("metrics file has no '{}' column", name)))
    };
    let (i_step, i_ld, i_lg, i_lss, i_lambda, i_fid, i_miou) = (
        idx("step")?,
        idx("L_D")?,
        idx("L_G")?,
        idx("L_ss")?,
        idx("lambda")?,
        idx("proxy_fid")?,
        idx("miou")?,
    );
    let mut m = Metrics {
        steps: vec![],
        loss_d: vec![],
        loss_g: vec![],
        loss_ss: vec![],
        lambda: vec![],
        fid: vec![],
        miou: vec![],
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("bad number at line {}", lineno + 2)))
        };
        let step = num(i_step)?;
        m.steps.push(step);
        m.loss_d.push(num(i_ld)?);
        m.loss_g.push(num(i_lg)?);
        m.loss_ss.push(num(i_lss)?);
        m.lambda.push(num(i_lambda)?);
        if let Some(v) = f.get(i_fid).and_then(|v| v.parse::<f64>().ok()) {
            m.fid.push((step, v));
        }
        if let Some(v) = f.get(i_miou).and_then(|v| v.parse::<f64>().ok()) {
            m.miou.push((step, v));
        }
    }
    if m.steps.is_empty() {
        return Err(Error::Data("metrics file has no data rows".into()));
    }
    Ok(m)
}

const W: u32 = 960;
const PANEL_H: u32 = 240;
const STRIP_H: u32 = 40;
const MARGIN: u32 = 48;

const BG: Rgb<u8> = Rgb([18, 18, 24]);
const GRID: Rgb<u8> = Rgb([55, 55, 65]);
const TEXT: Rgb<u8> = Rgb([200, 200, 200]);

struct Panel {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Panel {
    fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.xmin) / (self.xmax - self.xmin).max(1e-12);
        let fy = (y - self.ymin) / (self.ymax - self.ymin).max(1e-12);
        (
            self.x0 as i64 + (fx * (self.w - 1) as f64).round() as i64,
            (self.y0 + self.h - 1) as i64 - (fy * (self.h - 1) as f64).round() as i64,
        )
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_series(img: &mut RgbImage, p: &Panel, xs: &[f64], ys: &[f64], c: Rgb<u8>) {
    let mut prev: Option<(i64, i64)> = None;
    for (&x, &y) in xs.iter().zip(ys) {
        if !y.is_finite() {
            prev = None;
            continue;
        }
        let pt = p.map(x, y.clamp(p.ymin, p.ymax));
        if let Some(pr) = prev {
            draw_line(img, pr, pt, c);
        }
        prev = Some(pt);
    }
}

// 3x5 digit font for axis labels
const FONT: [(char, [u8; 5]); 14] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
    ('e', [0b000, 0b111, 0b110, 0b100, 0b111]),
    ('+', [0b000, 0b010, 0b111, 0b010, 0b000]),
];

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, c: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, glyph)) = FONT.iter().find(|(g, _)| *g == ch) {
            for (ry, row) in glyph.iter().enumerate() {
                for rx in 0..3 {
                    if row & (0b100 >> rx) != 0 {
                        let (px, py) = (cx + rx, y + ry as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, c);
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn fmt_short(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        format!("{:.3}", v)
    } else {
        format!("{:.1e}", v)
    }
}

fn frame_panel(img: &mut RgbImage, p: &Panel) {
    for x in p.x0..p.x0 + p.w {
        img.put_pixel(x, p.y0, GRID);
        img.put_pixel(x, p.y0 + p.h - 1, GRID);
    }
    for y in p.y0..p.y0 + p.h {
        img.put_pixel(p.x0, y, GRID);
        img.put_pixel(p.x0 + p.w - 1, y, GRID);
    }
    draw_text(img, p.x0.saturating_sub(44), p.y0, &fmt_short(p.ymax), TEXT);
    draw_text(
        img,
        p.x0.saturating_sub(44),
        p.y0 + p.h - 6,
        &fmt_short(p.ymin),
        TEXT,
    );
    draw_text(img, p.x0, p.y0 + p.h + 3, &fmt_short(p.xmin), TEXT);
    draw_text(
        img,
        p.x0 + p.w - 30,
        p.y0 + p.h + 3,
        &fmt_short(p.xmax),
        TEXT,
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render(m: &Metrics) -> RgbImage {
    let height = 2 * (PANEL_H + MARGIN) + STRIP_H + MARGIN;
    let mut img = RgbImage::from_pixel(W, height, BG);
    let xmin = m.steps.first().copied().unwrap_or(0.0);
    let xmax = m.steps.last().copied().unwrap_or(1.0).max(xmin + 1.0);

    // losses panel
    let (lo, hi) = range(
        m.loss_d
            .iter()
            .chain(&m.loss_g)
            .chain(&m.loss_ss)
            .copied(),
    );
    let losses = Panel {
        x0: MARGIN,
        y0: MARGIN / 2,
        w: W - MARGIN - 12,
        h: PANEL_H,
        xmin,
        xmax,
        ymin: lo,
        ymax: hi,
    };
    frame_panel(&mut img, &losses);
    draw_series(&mut img, &losses, &m.steps, &m.loss_d, Rgb([235, 110, 80]));
    draw_series(&mut img, &losses, &m.steps, &m.loss_g, Rgb([110, 170, 235]));
    draw_series(&mut img, &losses, &m.steps, &m.loss_ss, Rgb([120, 220, 140]));

    // FID (and mIoU when present) panel
    let fid_y0 = MARGIN / 2 + PANEL_H + MARGIN;
    let (flo, fhi) = range(m.fid.iter().map(|(_, v)| *v));
    let fid_panel = Panel {
        x0: MARGIN,
        y0: fid_y0,
        w: W - MARGIN - 12,
        h: PANEL_H,
        xmin,
        xmax,
        ymin: flo.min(0.0),
        ymax: fhi,
    };
    frame_panel(&mut img, &fid_panel);
    if !m.fid.is_empty() {
        let xs: Vec<f64> = m.fid.iter().map(|(s, _)| *s).collect();
        let ys: Vec<f64> = m.fid.iter().map(|(_, v)| *v).collect();
        draw_series(&mut img, &fid_panel, &xs, &ys, Rgb([240, 200, 80]));
        for (&x, &y) in xs.iter().zip(&ys) {
            let (px, py) = fid_panel.map(x, y.clamp(fid_panel.ymin, fid_panel.ymax));
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < W && (qy as u32) < img.height() {
                        img.put_pixel(qx as u32, qy as u32, Rgb([240, 200, 80]));
                    }
                }
            }
        }
    }
    if !m.miou.is_empty() {
        // mIoU rescaled onto the same panel (0..1 mapped over the panel height)
        let xs: Vec<f64> = m.miou.iter().map(|(s, _)| *s).collect();
        let ys: Vec<f64> = m
            .miou
            .iter()
            .map(|(_, v)| fid_panel.ymin + v * (fid_panel.ymax - fid_panel.ymin))
            .collect();
        draw_series(&mut img, &fid_panel, &xs, &ys, Rgb([180, 130, 235]));
    }

    // lambda strip: one colored column per step
    let strip_y0 = fid_y0 + PANEL_H + MARGIN;
    let strip = Panel {
        x0: MARGIN,
        y0: strip_y0,
        w: W - MARGIN - 12,
        h: STRIP_H,
        xmin,
        xmax,
        ymin: 0.0,
        ymax: 1.0,
    };
    frame_panel(&mut img, &strip);
    for (&s, &l) in m.steps.iter().zip(&m.lambda) {
        let (px, _) = strip.map(s, 0.0);
        let color = if l >= 0.5 {
            Rgb([235, 90, 90])
        } else if l >= 0.1 {
            Rgb([235, 180, 90])
        } else {
            Rgb([70, 110, 70])
        };
        for y in strip.y0 + 1..strip.y0 + strip.h - 1 {
            if px >= 0 && (px as u32) < W {
                img.put_pixel(px as u32, y, color);
            }
        }
    }
    img
}
