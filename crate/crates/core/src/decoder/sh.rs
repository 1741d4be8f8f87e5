use crate::{Error, Real, Result};

/// Real spherical harmonics up to degree 3.
pub const SH_DIM: usize = 16;

// Orthonormal real-SH constants: Y_0^0 = 1/(2 sqrt(pi)), band 1 = sqrt(3/(4 pi)),
// band 2 = sqrt(15/(4 pi)), sqrt(5/(16 pi)), sqrt(15/(16 pi)),
// band 3 = sqrt(35/(32 pi)), sqrt(105/(4 pi)), sqrt(21/(32 pi)),
// sqrt(7/(16 pi)), sqrt(105/(16 pi)).
const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_0: f64 = 1.092_548_430_592_079_2;
const C2_2: f64 = 0.315_391_565_252_520_05;
const C2_4: f64 = 0.546_274_215_296_039_6;
const C3_0: f64 = 0.590_043_589_926_643_5;
const C3_1: f64 = 2.890_611_442_640_554;
const C3_2: f64 = 0.457_045_799_464_465_7;
const C3_3: f64 = 0.373_176_332_590_115_4;
const C3_5: f64 = 1.445_305_721_320_277;

fn check_unit<S: Real>(d: &[S; 3]) -> Result<()> {
    let n2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).f64();
    if (n2.sqrt() - 1.0).abs() > 1e-6 || !n2.is_finite() {
        return Err(Error::domain(format!(
            "direction {:?} is not unit length",
            d.map(|v| v.f64())
        )));
    }
    Ok(())
}

pub fn sh_encode<S: Real>(d: [S; 3]) -> Result<[S; SH_DIM]> {
    check_unit(&d)?;
    Ok(sh_eval(d))
}

fn sh_eval<S: Real>(d: [S; 3]) -> [S; SH_DIM] {
    let l = S::lit;
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        l(C0),
        -l(C1) * y,
        l(C1) * z,
        -l(C1) * x,
        l(C2_0) * x * y,
        -l(C2_0) * y * z,
        l(C2_2) * (l(3.0) * zz - l(1.0)),
        -l(C2_0) * x * z,
        l(C2_4) * (xx - yy),
        l(C3_0) * y * (l(3.0) * xx - yy) * l(-1.0),
        l(C3_1) * x * y * z,
        l(C3_2) * y * (l(1.0) - l(5.0) * zz),
        l(C3_3) * z * (l(5.0) * zz - l(3.0)),
        l(C3_2) * x * (l(1.0) - l(5.0) * zz),
        l(C3_5) * z * (xx - yy),
        l(C3_0) * x * (l(3.0) * yy - xx),
    ]
}

/// Values and the gradient of each coefficient with respect to `d` (the
/// polynomial form, evaluated without renormalizing `d`).
pub fn sh_encode_with_grad<S: Real>(d: [S; 3]) -> Result<([S; SH_DIM], [[S; 3]; SH_DIM])> {
    check_unit(&d)?;
    let l = S::lit;
    let z0 = S::zero();
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let grad = [
        [z0, z0, z0],
        [z0, -l(C1), z0],
        [z0, z0, l(C1)],
        [-l(C1), z0, z0],
        [l(C2_0) * y, l(C2_0) * x, z0],
        [z0, -l(C2_0) * z, -l(C2_0) * y],
        [z0, z0, l(6.0 * C2_2) * z],
        [-l(C2_0) * z, z0, -l(C2_0) * x],
        [l(2.0 * C2_4) * x, -l(2.0 * C2_4) * y, z0],
        [
            -l(6.0 * C3_0) * x * y,
            l(3.0 * C3_0) * (yy - xx),
            z0,
        ],
        [l(C3_1) * y * z, l(C3_1) * x * z, l(C3_1) * x * y],
        [z0, l(C3_2) * (l(1.0) - l(5.0) * zz), -l(10.0 * C3_2) * y * z],
        [z0, z0, l(C3_3) * (l(15.0) * zz - l(3.0))],
        [l(C3_2) * (l(1.0) - l(5.0) * zz), z0, -l(10.0 * C3_2) * x * z],
        [l(2.0 * C3_5) * x * z, -l(2.0 * C3_5) * y * z, l(C3_5) * (xx - yy)],
        [l(3.0 * C3_0) * (yy - xx), l(6.0 * C3_0) * x * y, z0],
    ];
    Ok((sh_eval(d), grad))
}
