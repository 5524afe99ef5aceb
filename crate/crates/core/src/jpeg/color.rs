//! Full-range (JFIF) BT.601 colour transform on the `[0, 255]` scale.

/// Rows produce Y, Cb, Cr from R, G, B.
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

pub const YCBCR_OFFSET: [f64; 3] = [0.0, 128.0, 128.0];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// Exact inverse of [`RGB_TO_YCBCR`] (not the rounded textbook constants),
/// so that the round trip is the identity up to float error.
pub fn ycbcr_to_rgb_matrix() -> [[f64; 3]; 3] {
    invert3(&RGB_TO_YCBCR)
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            t[c][r] = m[r][c];
        }
    }
    t
}

pub fn rgb_to_ycbcr(rgb: [f64; 3]) -> [f64; 3] {
    let y = mat_vec(&RGB_TO_YCBCR, rgb);
    [
        y[0] + YCBCR_OFFSET[0],
        y[1] + YCBCR_OFFSET[1],
        y[2] + YCBCR_OFFSET[2],
    ]
}

pub fn ycbcr_to_rgb(ycc: [f64; 3]) -> [f64; 3] {
    let centred = [
        ycc[0] - YCBCR_OFFSET[0],
        ycc[1] - YCBCR_OFFSET[1],
        ycc[2] - YCBCR_OFFSET[2],
    ];
    mat_vec(&ycbcr_to_rgb_matrix(), centred)
}
