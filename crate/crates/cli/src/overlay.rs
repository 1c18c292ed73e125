use image::{GrayImage, Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_circle_mut, draw_line_segment_mut};
use sspsd_core::postprocess::Detections;
use sspsd_core::types::Shape;

const ARROW_LEN: f32 = 24.0;
const SLOT_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
const T_COLOR: Rgb<u8> = Rgb([230, 60, 40]);
const L_COLOR: Rgb<u8> = Rgb([40, 120, 240]);

fn arrow(img: &mut RgbImage, x: f32, y: f32, theta_deg: f64, color: Rgb<u8>) {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let tip = (x + ARROW_LEN * c as f32, y + ARROW_LEN * s as f32);
    draw_line_segment_mut(img, (x, y), tip, color);
    for side in [150.0f64, -150.0] {
        let (s, c) = (theta_deg + side).to_radians().sin_cos();
        draw_line_segment_mut(img, tip, (tip.0 + 8.0 * c as f32, tip.1 + 8.0 * s as f32), color);
    }
}

/// Draws marking points as arrows along θ₁ and slots as entrance lines.
pub fn render(image: &GrayImage, det: &Detections) -> RgbImage {
    let mut out = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    });
    for s in &det.slots {
        let (a, b) = ((s.p1[0] as f32, s.p1[1] as f32), (s.p2[0] as f32, s.p2[1] as f32));
        draw_line_segment_mut(&mut out, a, b, SLOT_COLOR);
    }
    for p in &det.points {
        let color = if p.shape == Shape::T { T_COLOR } else { L_COLOR };
        draw_hollow_circle_mut(&mut out, (p.x as i32, p.y as i32), 5, color);
        arrow(&mut out, p.x as f32, p.y as f32, p.theta1, color);
    }
    out
}
