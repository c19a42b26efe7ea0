//! Figure emission: grayscale mel-spectrogram heatmaps, three-panel
//! before/after comparison strips (full / partial / generated), and RGB
//! piano-roll images with the generated channel's notes outlined in
//! black. All rasterization is done in-repo; the `image` crate is used
//! only for PNG encoding.

use crate::audio::MelSpec;
use crate::pianoroll::{Instrument, PianoRoll};
use image::{GrayImage, Luma, Rgb, RgbImage};
use std::io;
use std::path::Path;

/// Pixels per piano-roll cell (both axes); large enough for a visible
/// 1-px outline.
pub const ROLL_CELL_PX: u32 = 5;
/// Width of the separator between triptych panels.
const PANEL_GAP: u32 = 2;

/// Rasterize a unit-interval mel spectrogram: time on x, mel bin on y
/// with bin 0 at the bottom, brightness proportional to energy.
pub fn mel_to_image(spec: &MelSpec) -> GrayImage {
    let (n_mels, frames) = spec.values.dim();
    let mut img = GrayImage::new(frames as u32, n_mels as u32);
    for ((m, f), &v) in spec.values.indexed_iter() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        // Flip vertically so low frequencies sit at the bottom.
        img.put_pixel(f as u32, (n_mels - 1 - m) as u32, Luma([level]));
    }
    img
}

/// Three mel panels side by side — full mix, stem-subtracted mix,
/// generated mix — separated by thin white gaps, mirroring the usual
/// before/after stem-addition comparison layout.
pub fn triptych(full: &MelSpec, partial: &MelSpec, generated: &MelSpec) -> GrayImage {
    let panels = [full, partial, generated].map(mel_to_image);
    let h = panels.iter().map(|p| p.height()).max().unwrap();
    let w: u32 =
        panels.iter().map(|p| p.width()).sum::<u32>() + 2 * PANEL_GAP;
    let mut img = GrayImage::from_pixel(w, h, Luma([255]));
    let mut x0 = 0;
    for p in &panels {
        for (x, y, px) in p.enumerate_pixels() {
            img.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + PANEL_GAP;
    }
    img
}

fn channel_color(i: Instrument) -> Rgb<u8> {
    match i {
        Instrument::Drums => Rgb([220, 60, 50]),
        Instrument::Bass => Rgb([60, 160, 70]),
        Instrument::Guitar => Rgb([60, 90, 210]),
    }
}

/// Rasterize a piano roll: time on x, pitch on y (low pitches at the
/// bottom), one color per instrument channel. When `generated` names a
/// channel, its notes are outlined in black so they stand out from the
/// context.
pub fn roll_to_image(roll: &PianoRoll, generated: Option<Instrument>) -> RgbImage {
    let (_, steps, pitches) = roll.data.dim();
    let cell = ROLL_CELL_PX;
    let mut img = RgbImage::from_pixel(steps as u32 * cell, pitches as u32 * cell, Rgb([255, 255, 255]));
    let mut fill = |s: usize, p: usize, color: Rgb<u8>, outline: bool| {
        let x0 = s as u32 * cell;
        let y0 = (pitches - 1 - p) as u32 * cell;
        for dx in 0..cell {
            for dy in 0..cell {
                let edge = dx == 0 || dy == 0 || dx == cell - 1 || dy == cell - 1;
                let px = if outline && edge { Rgb([0, 0, 0]) } else { color };
                img.put_pixel(x0 + dx, y0 + dy, px);
            }
        }
    };
    // Context channels first, generated channel last so its outline wins
    // where cells overlap.
    let mut order: Vec<Instrument> = Instrument::ALL
        .into_iter()
        .filter(|i| Some(*i) != generated)
        .collect();
    if let Some(g) = generated {
        order.push(g);
    }
    for inst in order {
        let ch = roll.data.index_axis(ndarray::Axis(0), inst.channel());
        let outline = Some(inst) == generated;
        for ((s, p), &v) in ch.indexed_iter() {
            if v != 0 {
                fill(s, p, channel_color(inst), outline);
            }
        }
    }
    img
}

pub fn save_mel_png(path: &Path, spec: &MelSpec) -> io::Result<()> {
    mel_to_image(spec)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(io::Error::other)
}

pub fn save_triptych_png(
    path: &Path,
    full: &MelSpec,
    partial: &MelSpec,
    generated: &MelSpec,
) -> io::Result<()> {
    triptych(full, partial, generated)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(io::Error::other)
}

pub fn save_roll_png(
    path: &Path,
    roll: &PianoRoll,
    generated: Option<Instrument>,
) -> io::Result<()> {
    roll_to_image(roll, generated)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(io::Error::other)
}
