//! Hand-rolled fixtures shared by module tests.

/// A minimal but well-formed PE32+ image with one executable `.text`
/// section.  With `file_len = 0x500` the region map is:
/// DOS `[0, 0x80)`, headers `[0x80, 0x200)`, `.text` content
/// `[0x200, 0x380)`, slack `[0x380, 0x400)`, overlay `[0x400, 0x500)`.
pub(crate) fn minimal_pe(file_len: usize) -> Vec<u8> {
    let mut b = vec![0u8; file_len];
    b[0] = b'M';
    b[1] = b'Z';
    b[0x3C..0x40].copy_from_slice(&0x80u32.to_le_bytes());
    // PE signature + COFF header.
    b[0x80..0x84].copy_from_slice(b"PE\0\0");
    b[0x84..0x86].copy_from_slice(&0x8664u16.to_le_bytes()); // machine
    b[0x86..0x88].copy_from_slice(&1u16.to_le_bytes()); // sections
    b[0x94..0x96].copy_from_slice(&0xF0u16.to_le_bytes()); // opt size
    b[0x96..0x98].copy_from_slice(&0x0002u16.to_le_bytes()); // characteristics
    // Optional header (PE32+): magic and SizeOfHeaders.
    b[0x98..0x9A].copy_from_slice(&0x20Bu16.to_le_bytes());
    b[0x98 + 60..0x98 + 64].copy_from_slice(&0x200u32.to_le_bytes());
    // Section table at 0x98 + 0xF0 = 0x188.
    let s = 0x188;
    b[s..s + 5].copy_from_slice(b".text");
    b[s + 8..s + 12].copy_from_slice(&0x180u32.to_le_bytes()); // virtual_size
    b[s + 16..s + 20].copy_from_slice(&0x200u32.to_le_bytes()); // size_raw
    b[s + 20..s + 24].copy_from_slice(&0x200u32.to_le_bytes()); // ptr_raw
    b[s + 36..s + 40].copy_from_slice(&0x6000_0020u32.to_le_bytes()); // exec
    b
}
