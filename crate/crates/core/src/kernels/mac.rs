/// Packs two 16-bit lanes into one 32-bit word, `lo` in bits 0..16.
#[inline(always)]
pub fn pack_i16x2(lo: i16, hi: i16) -> u32 {
    (lo as u16 as u32) | ((hi as u16 as u32) << 16)
}

/// Dual 16x16 signed multiply-accumulate over packed lanes:
/// `acc + a.lo * b.lo + a.hi * b.hi` (wrapping, like the DSP instruction).
#[inline(always)]
pub fn smlad(acc: i32, a: u32, b: u32) -> i32 {
    let a_lo = a as u16 as i16 as i32;
    let a_hi = (a >> 16) as u16 as i16 as i32;
    let b_lo = b as u16 as i16 as i32;
    let b_hi = (b >> 16) as u16 as i16 as i32;
    acc.wrapping_add(a_lo * b_lo).wrapping_add(a_hi * b_hi)
}

/// Two INT8 products accumulated through the sign-extend/concatenate path.
#[inline]
pub fn paired_mac(acc: i32, w: [i8; 2], x: [i8; 2]) -> i32 {
    smlad(acc, pack_i16x2(w[0] as i16, w[1] as i16), pack_i16x2(x[0] as i16, x[1] as i16))
}

/// Dot product of INT8 weights with zero-point-shifted INT8 inputs.
#[inline]
pub(crate) fn dot_offset(mut acc: i32, w: &[i8], x: &[i8], zin: i16) -> i32 {
    let mut wp = w.chunks_exact(2);
    let mut xp = x.chunks_exact(2);
    for (wc, xc) in (&mut wp).zip(&mut xp) {
        acc = smlad(
            acc,
            pack_i16x2(wc[0] as i16, wc[1] as i16),
            pack_i16x2(xc[0] as i16 - zin, xc[1] as i16 - zin),
        );
    }
    if let (Some(&wl), Some(&xl)) = (wp.remainder().first(), xp.remainder().first()) {
        acc = acc.wrapping_add(wl as i32 * (xl as i16 - zin) as i32);
    }
    acc
}
