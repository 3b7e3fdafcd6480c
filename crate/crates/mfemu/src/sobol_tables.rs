//! Primitive polynomials and initial direction-number values for the first
//! 32 Sobol dimensions (Joe–Kuo order), stored as `(polynomial, m_1..m_s)`.
//! Values follow the standard new-Joe–Kuo 6.21201 table; the expansion
//! recurrence lives in `sampling::sobol`.

pub(crate) const SOBOL_DIMS: usize = 32;

/// Primitive polynomial bit masks (leading and trailing coefficients included).
pub(crate) const POLY: [u32; 32] = [
    1, 3, 7, 11, 13, 19, 25, 37, 41, 47, 55, 59, 61, 67, 91, 97, 103, 109, 115, 131, 137, 143, 145, 157, 167, 171, 185, 191, 193, 203, 211, 213,
];

/// Initial `m` values per dimension, zero-padded to the maximum degree (7).
pub(crate) const M_INIT: [[u64; 7]; 32] = [
    [0, 0, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 0, 0],
    [1, 3, 0, 0, 0, 0, 0],
    [1, 3, 1, 0, 0, 0, 0],
    [1, 1, 1, 0, 0, 0, 0],
    [1, 1, 3, 3, 0, 0, 0],
    [1, 3, 5, 13, 0, 0, 0],
    [1, 1, 5, 5, 17, 0, 0],
    [1, 1, 5, 5, 5, 0, 0],
    [1, 1, 7, 11, 19, 0, 0],
    [1, 1, 5, 1, 1, 0, 0],
    [1, 1, 1, 3, 11, 0, 0],
    [1, 3, 5, 5, 31, 0, 0],
    [1, 3, 3, 9, 7, 49, 0],
    [1, 1, 1, 15, 21, 21, 0],
    [1, 3, 1, 13, 27, 49, 0],
    [1, 1, 1, 15, 7, 5, 0],
    [1, 3, 1, 15, 13, 25, 0],
    [1, 1, 5, 5, 19, 61, 0],
    [1, 3, 7, 11, 23, 15, 103],
    [1, 3, 7, 13, 13, 15, 69],
    [1, 1, 3, 13, 7, 35, 63],
    [1, 3, 5, 9, 1, 25, 53],
    [1, 3, 1, 13, 9, 35, 107],
    [1, 3, 1, 5, 27, 61, 31],
    [1, 1, 5, 11, 19, 41, 61],
    [1, 3, 5, 3, 3, 13, 69],
    [1, 1, 7, 13, 1, 19, 1],
    [1, 3, 7, 5, 13, 19, 59],
    [1, 1, 3, 9, 25, 29, 41],
    [1, 3, 5, 13, 23, 1, 55],
    [1, 3, 7, 3, 13, 59, 17],
];
