use aperture_core::beamforming::DirectivityMap;

/// Lowest level shown; anything quieter is drawn in the floor colour.
const FLOOR_DB: f64 = -40.0;
const LOW: [f64; 3] = [48.0, 48.0, 56.0];
const HIGH: [f64; 3] = [255.0, 226.0, 32.0];

/// Encode a map as an RGB PNG: frequency runs left to right, angle bottom to
/// top, so the image reads like the usual angle-versus-frequency plot.
pub fn encode(map: &DirectivityMap) -> Vec<u8> {
    let width = map.frequency_bins.len();
    let height = map.scan_angles.len();
    let mut pixels = Vec::with_capacity(width * height * 3);
    for row in map.response_db.iter().rev() {
        for &db in row {
            let t = if db.is_finite() {
                ((db - FLOOR_DB) / -FLOOR_DB).clamp(0.0, 1.0)
            } else {
                0.0
            };
            for c in 0..3 {
                pixels.push((LOW[c] + t * (HIGH[c] - LOW[c])).round() as u8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(&pixels)
            .expect("in-memory PNG body");
    }
    out
}
