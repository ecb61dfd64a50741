// SPDX-License-Identifier: Apache-2.0

//! Stand-alone decoder for BGP UPDATE messages carrying EVPN NLRI, written
//! directly from the wire layout and sharing no code with the crate's codec.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rd {
    pub admin: u16,
    pub number: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefRoute {
    EthAd { rd: Rd, esi: [u8; 10], tag: u32, label: u32 },
    MacIp { rd: Rd, esi: [u8; 10], tag: u32, mac: [u8; 6], ip: Vec<u8>, labels: Vec<u32> },
    Imet { rd: Rd, tag: u32, ip: Vec<u8> },
    Es { rd: Rd, esi: [u8; 10], ip: Vec<u8> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefUpdate {
    pub reach: Vec<RefRoute>,
    pub unreach: Vec<RefRoute>,
    pub next_hop: Vec<u8>,
    pub route_targets: Vec<(u16, u32)>,
    pub origin: Option<u8>,
}

struct Cur<'a> {
    b: &'a [u8],
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.b.len() < n {
            return Err(format!("need {n} bytes, have {}", self.b.len()));
        }
        let (h, t) = self.b.split_at(n);
        self.b = t;
        Ok(h)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, String> {
        let b = self.take(2)?;
        Ok(u16::from(b[0]) << 8 | u16::from(b[1]))
    }
    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(b.iter().fold(0u32, |acc, x| acc << 8 | u32::from(*x)))
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], String> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
    fn done(&self) -> bool {
        self.b.is_empty()
    }
}

fn rd(c: &mut Cur) -> Result<Rd, String> {
    let ty = c.u16()?;
    if ty != 0 {
        return Err(format!("RD type {ty}"));
    }
    Ok(Rd { admin: c.u16()?, number: c.u32()? })
}

fn label(c: &mut Cur) -> Result<u32, String> {
    let b = c.take(3)?;
    Ok(u32::from(b[0]) << 12 | u32::from(b[1]) << 4 | u32::from(b[2]) >> 4)
}

fn ip_by_bits(c: &mut Cur) -> Result<Vec<u8>, String> {
    let bits = c.u8()?;
    match bits {
        0 | 32 | 128 => Ok(c.take(bits as usize / 8)?.to_vec()),
        _ => Err(format!("IP length {bits}")),
    }
}

fn route(ty: u8, body: &[u8]) -> Result<RefRoute, String> {
    let mut c = Cur { b: body };
    let r = match ty {
        1 => RefRoute::EthAd { rd: rd(&mut c)?, esi: c.arr()?, tag: c.u32()?, label: label(&mut c)? },
        2 => {
            let rd = rd(&mut c)?;
            let esi = c.arr()?;
            let tag = c.u32()?;
            if c.u8()? != 48 {
                return Err("MAC length".into());
            }
            let mac = c.arr()?;
            let ip = ip_by_bits(&mut c)?;
            let mut labels = vec![label(&mut c)?];
            if !c.done() {
                labels.push(label(&mut c)?);
            }
            RefRoute::MacIp { rd, esi, tag, mac, ip, labels }
        }
        3 => {
            let rd = rd(&mut c)?;
            let tag = c.u32()?;
            let ip = ip_by_bits(&mut c)?;
            if ip.is_empty() {
                return Err("IMET without originating IP".into());
            }
            RefRoute::Imet { rd, tag, ip }
        }
        4 => {
            let rd = rd(&mut c)?;
            let esi = c.arr()?;
            let ip = ip_by_bits(&mut c)?;
            if ip.is_empty() {
                return Err("ES route without originating IP".into());
            }
            RefRoute::Es { rd, esi, ip }
        }
        _ => return Err(format!("route type {ty}")),
    };
    if !c.done() {
        return Err(format!("{} trailing bytes in type {ty}", c.b.len()));
    }
    Ok(r)
}

fn nlri_list(b: &[u8]) -> Result<Vec<RefRoute>, String> {
    let mut c = Cur { b };
    let mut out = Vec::new();
    while !c.done() {
        let ty = c.u8()?;
        let len = c.u8()? as usize;
        out.push(route(ty, c.take(len)?)?);
    }
    Ok(out)
}

fn afi_safi(c: &mut Cur) -> Result<(), String> {
    let (afi, safi) = (c.u16()?, c.u8()?);
    if (afi, safi) != (25, 70) {
        return Err(format!("AFI/SAFI {afi}/{safi}"));
    }
    Ok(())
}

/// Decodes one complete BGP message, which must be an EVPN UPDATE.
pub fn decode_update(msg: &[u8]) -> Result<RefUpdate, String> {
    let mut c = Cur { b: msg };
    if c.take(16)?.iter().any(|b| *b != 0xff) {
        return Err("bad marker".into());
    }
    let len = c.u16()? as usize;
    if len != msg.len() || !(19..=4096).contains(&len) {
        return Err(format!("length field {len}, message {}", msg.len()));
    }
    if c.u8()? != 2 {
        return Err("not an UPDATE".into());
    }
    let wlen = c.u16()? as usize;
    if wlen != 0 {
        return Err("IPv4 withdrawn routes present".into());
    }
    let alen = c.u16()? as usize;
    let mut attrs = Cur { b: c.take(alen)? };
    if !c.done() {
        return Err("IPv4 NLRI present".into());
    }
    let mut u = RefUpdate::default();
    while !attrs.done() {
        let flags = attrs.u8()?;
        let code = attrs.u8()?;
        let vlen = if flags & 0x10 != 0 { attrs.u16()? as usize } else { attrs.u8()? as usize };
        let mut v = Cur { b: attrs.take(vlen)? };
        match code {
            1 => u.origin = Some(v.u8()?),
            14 => {
                afi_safi(&mut v)?;
                let nh_len = v.u8()? as usize;
                u.next_hop = v.take(nh_len)?.to_vec();
                v.u8()?;
                u.reach = nlri_list(v.b)?;
            }
            15 => {
                afi_safi(&mut v)?;
                u.unreach = nlri_list(v.b)?;
            }
            16 => {
                if vlen % 8 != 0 {
                    return Err("extended community length".into());
                }
                while !v.done() {
                    let (ty, sub) = (v.u8()?, v.u8()?);
                    let (admin, local) = (v.u16()?, v.u32()?);
                    if ty == 0x00 && sub == 0x02 {
                        u.route_targets.push((admin, local));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(u)
}
