//! CRC-16 with the reflected 0xA001 polynomial (the Modbus variant the
//! AM2315 appends to every frame, least-significant octet first).

/// 256-entry lookup table for the reflected polynomial, built once.
fn table() -> &'static [u16; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u16; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u16; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut crc = i as u16;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xA001 } else { crc >> 1 };
            }
            *slot = crc;
        }
        t
    })
}

/// CRC-16 of `data`, initial value 0xFFFF.
pub fn crc16(data: &[u8]) -> u16 {
    let t = table();
    let mut crc = 0xFFFFu16;
    for &b in data {
        let idx = ((crc ^ b as u16) & 0xFF) as usize;
        crc = (crc >> 8) ^ t[idx];
    }
    crc
}
