//! sRGB <-> CIELAB conversion (D65 white) and the network-range normalization.
//!
//! Conversions are evaluated in `f64` and stored as [`Real`](crate::Real) planes.

use crate::Real;
use std::path::Path;
use std::sync::LazyLock;

use crate::error::{Error, Result};

/// Linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

/// Reference white, taken as the image of linear (1, 1, 1) so that every gray
/// maps onto the neutral axis exactly.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let m = &RGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
});

const DELTA: f64 = 6.0 / 29.0;

/// 8-bit sRGB image, row-major RGB triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Planar CIELAB image: `l` in [0, 100], `a`/`b` in [-128, 127].
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<Real>,
    pub a: Vec<Real>,
    pub b: Vec<Real>,
}

/// Lab mapped into [-1, 1]: `l = L / 50 - 1`, `a = a / 128`, `b = b / 128`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLab {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "RgbImage::new",
                format!("data length {} != 3 * {} * {}", data.len(), width, height),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// True when every pixel has R = G = B.
    pub fn is_grayscale(&self) -> bool {
        self.pixels().all(|[r, g, b]| r == g && g == b)
    }

    /// Reads any format the `image` crate decodes; alpha is discarded.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_image(img.to_rgb8()))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn from_image(img: image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        }
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }

    /// Triangle-filter resize; identity when the size already matches.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let out = image::imageops::resize(
            &self.to_image(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_image(out)
    }
}

impl LabImage {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// sRGB transfer function inverse: encoded [0, 1] -> linear.
pub fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB transfer function: linear [0, 1] -> encoded.
pub fn srgb_encode(u: f64) -> f64 {
    if u <= 0.003_130_8 {
        12.92 * u
    } else {
        1.055 * u.powf(1.0 / 2.4) - 0.055
    }
}

fn srgb_encode_deriv(u: f64) -> f64 {
    if u <= 0.003_130_8 {
        12.92
    } else {
        1.055 / 2.4 * u.powf(1.0 / 2.4 - 1.0)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn lab_f_inv_deriv(t: f64) -> f64 {
    if t > DELTA {
        3.0 * t * t
    } else {
        3.0 * DELTA * DELTA
    }
}

/// One pixel, encoded sRGB in [0, 1] -> (L, a, b).
pub fn srgb_unit_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let w = *WHITE;
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_to_linear(lab: [f64; 3]) -> [f64; 3] {
    let w = *WHITE;
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        w[0] * lab_f_inv(fx),
        w[1] * lab_f_inv(fy),
        w[2] * lab_f_inv(fz),
    ];
    mat_vec(&XYZ_TO_RGB, xyz)
}

/// One pixel, (L, a, b) -> encoded sRGB clamped to [0, 1].
pub fn lab_to_srgb_unit(lab: [f64; 3]) -> [f64; 3] {
    lab_to_linear(lab).map(|u| srgb_encode(u.clamp(0.0, 1.0)))
}

/// [`lab_to_srgb_unit`] together with its Jacobian `j[i][k] = d rgb_i / d lab_k`.
///
/// Channels clamped at the gamut boundary have zero derivative.
pub fn lab_to_srgb_unit_jacobian(lab: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let w = *WHITE;
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        w[0] * lab_f_inv(fx),
        w[1] * lab_f_inv(fy),
        w[2] * lab_f_inv(fz),
    ];
    let (dx, dy, dz) = (
        w[0] * lab_f_inv_deriv(fx),
        w[1] * lab_f_inv_deriv(fy),
        w[2] * lab_f_inv_deriv(fz),
    );
    // d xyz / d (L, a, b)
    let dxyz = [
        [dx / 116.0, dx / 500.0, 0.0],
        [dy / 116.0, 0.0, 0.0],
        [dz / 116.0, 0.0, -dz / 200.0],
    ];
    let m = &*XYZ_TO_RGB;
    let lin = mat_vec(m, xyz);
    let mut rgb = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for i in 0..3 {
        let u = lin[i];
        let inside = (0.0..=1.0).contains(&u);
        let uc = u.clamp(0.0, 1.0);
        rgb[i] = srgb_encode(uc);
        if inside {
            let s = srgb_encode_deriv(uc);
            for k in 0..3 {
                let dlin = m[i][0] * dxyz[0][k] + m[i][1] * dxyz[1][k] + m[i][2] * dxyz[2][k];
                jac[i][k] = s * dlin;
            }
        }
    }
    (rgb, jac)
}

pub fn srgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.width * img.height;
    let mut out = LabImage {
        width: img.width,
        height: img.height,
        l: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
    };
    for [r, g, b] in img.pixels() {
        let lab = srgb_unit_to_lab([r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]);
        out.l.push(lab[0].clamp(0.0, 100.0) as Real);
        out.a.push(lab[1].clamp(-128.0, 127.0) as Real);
        out.b.push(lab[2].clamp(-128.0, 127.0) as Real);
    }
    out
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors are clamped.
pub fn lab_to_srgb(img: &LabImage) -> RgbImage {
    let mut data = Vec::with_capacity(3 * img.len());
    for i in 0..img.len() {
        let rgb = lab_to_srgb_unit([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        data.extend(rgb.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    RgbImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub fn normalize_lab(img: &LabImage) -> NormalizedLab {
    NormalizedLab {
        width: img.width,
        height: img.height,
        l: img.l.iter().map(|&v| v as f64 / 50.0 - 1.0).collect(),
        a: img.a.iter().map(|&v| v as f64 / 128.0).collect(),
        b: img.b.iter().map(|&v| v as f64 / 128.0).collect(),
    }
}

pub fn denormalize_lab(n: &NormalizedLab) -> LabImage {
    LabImage {
        width: n.width,
        height: n.height,
        l: n.l.iter().map(|&v| ((v + 1.0) * 50.0) as Real).collect(),
        a: n.a.iter().map(|&v| (v * 128.0) as Real).collect(),
        b: n.b.iter().map(|&v| (v * 128.0) as Real).collect(),
    }
}
