//! Sparse, paged, copy-on-write 32-bit address space.
//!
//! Pages are 4 KiB and reference counted. Cloning a space or copying whole
//! pages between spaces shares the page until either side writes to it.
//! Unmapped memory reads as zero; a page is materialized on first write.
//! Sharing is never observable: every read sees exactly what a deep copy
//! would have produced.

use std::sync::Arc;

use sha2::{Digest, Sha256};

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: usize = 1 << PAGE_SHIFT;
pub const PAGE_MASK: u32 = PAGE_SIZE as u32 - 1;
/// Number of page-number bits (4 GiB / 4 KiB = 2^20 pages).
pub const PAGE_NUMBER_BITS: u32 = 20;

const LEAF_BITS: u32 = 10;
const LEAF_LEN: usize = 1 << LEAF_BITS;
const DIR_LEN: usize = 1 << (PAGE_NUMBER_BITS - LEAF_BITS);

pub type Page = [u8; PAGE_SIZE];

#[derive(Clone)]
struct Leaf {
    pages: Vec<Option<Arc<Page>>>,
    mapped: usize,
}

impl Leaf {
    fn new() -> Leaf {
        Leaf {
            pages: vec![None; LEAF_LEN],
            mapped: 0,
        }
    }
}

#[derive(Clone)]
pub struct AddressSpace {
    dir: Vec<Option<Arc<Leaf>>>,
}

impl Default for AddressSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for AddressSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AddressSpace")
            .field("mapped_pages", &self.mapped_pages())
            .finish()
    }
}

#[inline]
fn split(pn: u32) -> (usize, usize) {
    ((pn >> LEAF_BITS) as usize, (pn as usize) & (LEAF_LEN - 1))
}

fn zero_page() -> Arc<Page> {
    Arc::new([0u8; PAGE_SIZE])
}

impl AddressSpace {
    pub fn new() -> AddressSpace {
        AddressSpace {
            dir: vec![None; DIR_LEN],
        }
    }

    /// A copy that shares no pages with `self`.
    pub fn deep_clone(&self) -> AddressSpace {
        let mut out = AddressSpace::new();
        for (pn, page) in self.pages() {
            out.set_page(pn, Some(Arc::new(**page)));
        }
        out
    }

    pub fn clear(&mut self) {
        self.dir.iter_mut().for_each(|d| *d = None);
    }

    pub fn mapped_pages(&self) -> usize {
        self.dir.iter().flatten().map(|l| l.mapped).sum()
    }

    #[inline]
    pub fn page(&self, pn: u32) -> Option<&Arc<Page>> {
        let (d, l) = split(pn);
        self.dir[d].as_ref()?.pages[l].as_ref()
    }

    pub fn set_page(&mut self, pn: u32, page: Option<Arc<Page>>) {
        let (d, l) = split(pn);
        if page.is_none() && self.dir[d].is_none() {
            return;
        }
        let leaf = Arc::make_mut(self.dir[d].get_or_insert_with(|| Arc::new(Leaf::new())));
        let was = leaf.pages[l].is_some();
        let now = page.is_some();
        leaf.pages[l] = page;
        match (was, now) {
            (false, true) => leaf.mapped += 1,
            (true, false) => leaf.mapped -= 1,
            _ => {}
        }
        if leaf.mapped == 0 {
            self.dir[d] = None;
        }
    }

    #[inline]
    fn page_mut(&mut self, pn: u32) -> &mut Page {
        let (d, l) = split(pn);
        let leaf = Arc::make_mut(self.dir[d].get_or_insert_with(|| Arc::new(Leaf::new())));
        let slot = &mut leaf.pages[l];
        if slot.is_none() {
            *slot = Some(zero_page());
            leaf.mapped += 1;
        }
        Arc::make_mut(slot.as_mut().expect("materialized"))
    }

    /// Mapped pages in ascending page-number order.
    pub fn pages(&self) -> impl Iterator<Item = (u32, &Arc<Page>)> + '_ {
        self.dir.iter().enumerate().flat_map(|(d, leaf)| {
            leaf.iter().flat_map(move |leaf| {
                leaf.pages.iter().enumerate().filter_map(move |(l, p)| {
                    p.as_ref()
                        .map(|p| (((d as u32) << LEAF_BITS) | l as u32, p))
                })
            })
        })
    }

    /// Mapped page numbers within `[first, last]`.
    pub fn pages_in(&self, first: u32, last: u32) -> impl Iterator<Item = u32> + '_ {
        let (d0, _) = split(first);
        let (d1, _) = split(last);
        (d0..=d1).flat_map(move |d| {
            self.dir[d].iter().flat_map(move |leaf| {
                leaf.pages
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.is_some())
                    .map(move |(l, _)| ((d as u32) << LEAF_BITS) | l as u32)
                    .filter(move |pn| *pn >= first && *pn <= last)
            })
        })
    }

    /// Reads an aligned word. Callers guarantee 4-byte alignment.
    #[inline]
    pub fn read_u32(&self, addr: u32) -> u32 {
        debug_assert_eq!(addr & 3, 0);
        match self.page(addr >> PAGE_SHIFT) {
            Some(p) => {
                let o = (addr & PAGE_MASK) as usize;
                u32::from_le_bytes([p[o], p[o + 1], p[o + 2], p[o + 3]])
            }
            None => 0,
        }
    }

    #[inline]
    pub fn write_u32(&mut self, addr: u32, value: u32) {
        debug_assert_eq!(addr & 3, 0);
        let o = (addr & PAGE_MASK) as usize;
        self.page_mut(addr >> PAGE_SHIFT)[o..o + 4].copy_from_slice(&value.to_le_bytes());
    }

    pub fn read_u8(&self, addr: u32) -> u8 {
        self.page(addr >> PAGE_SHIFT)
            .map_or(0, |p| p[(addr & PAGE_MASK) as usize])
    }

    pub fn write_u8(&mut self, addr: u32, value: u8) {
        self.page_mut(addr >> PAGE_SHIFT)[(addr & PAGE_MASK) as usize] = value;
    }

    /// Fills `buf` from `[addr, addr + buf.len())`. The range must not wrap.
    pub fn read_bytes(&self, addr: u32, buf: &mut [u8]) {
        assert!(addr as u64 + buf.len() as u64 <= 1 << 32, "range wraps");
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u32;
            let o = (a & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - o).min(buf.len() - done);
            match self.page(a >> PAGE_SHIFT) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[o..o + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub fn read_vec(&self, addr: u32, len: usize) -> Vec<u8> {
        let mut v = vec![0; len];
        self.read_bytes(addr, &mut v);
        v
    }

    /// Writes `data` at `addr`. Zero bytes landing on unmapped pages do not
    /// materialize them.
    pub fn write_bytes(&mut self, addr: u32, data: &[u8]) {
        assert!(addr as u64 + data.len() as u64 <= 1 << 32, "range wraps");
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u32;
            let o = (a & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - o).min(data.len() - done);
            let chunk = &data[done..done + n];
            let pn = a >> PAGE_SHIFT;
            if self.page(pn).is_some() || chunk.iter().any(|&b| b != 0) {
                self.page_mut(pn)[o..o + n].copy_from_slice(chunk);
            }
            done += n;
        }
    }

    /// Zeroes `[addr, addr + len)`, dropping whole pages.
    pub fn zero_range(&mut self, addr: u32, len: u64) {
        let end = addr as u64 + len;
        assert!(end <= 1 << 32, "range wraps");
        let mut a = addr as u64;
        while a < end {
            let o = (a as u32 & PAGE_MASK) as u64;
            let n = (PAGE_SIZE as u64 - o).min(end - a);
            let pn = (a >> PAGE_SHIFT) as u32;
            if n == PAGE_SIZE as u64 && self.dir[split(pn).0].is_none() {
                let leaf_end = ((pn as u64 >> LEAF_BITS) + 1) << (LEAF_BITS + PAGE_SHIFT);
                a = leaf_end.min(end - (end & PAGE_MASK as u64)).max(a + n);
                continue;
            }
            if n == PAGE_SIZE as u64 {
                self.set_page(pn, None);
            } else if self.page(pn).is_some() {
                self.page_mut(pn)[o as usize..(o + n) as usize].fill(0);
            }
            a += n;
        }
    }

    /// Copies `[src_addr, src_addr + len)` of `src` to `dst_addr` in `self`.
    ///
    /// Whole, identically-aligned pages are shared when `share` is set and
    /// duplicated otherwise. Ranges must not wrap.
    pub fn copy_from(
        &mut self,
        src: &AddressSpace,
        src_addr: u32,
        dst_addr: u32,
        len: u64,
        share: bool,
    ) {
        assert!(src_addr as u64 + len <= 1 << 32, "source range wraps");
        assert!(dst_addr as u64 + len <= 1 << 32, "destination range wraps");
        if len == 0 {
            return;
        }
        let aligned = (src_addr & PAGE_MASK) == (dst_addr & PAGE_MASK);
        if !aligned {
            let mut buf = vec![0u8; PAGE_SIZE];
            let mut done = 0u64;
            while done < len {
                let n = (PAGE_SIZE as u64).min(len - done) as usize;
                src.read_bytes(src_addr + done as u32, &mut buf[..n]);
                self.write_bytes(dst_addr + done as u32, &buf[..n]);
                done += n as u64;
            }
            return;
        }
        let mut done = 0u64;
        while done < len {
            let s = src_addr as u64 + done;
            let d = dst_addr as u64 + done;
            let o = (s as u32 & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - o).min((len - done) as usize);
            let spn = (s >> PAGE_SHIFT) as u32;
            let dpn = (d >> PAGE_SHIFT) as u32;
            if n == PAGE_SIZE
                && src.dir[split(spn).0].is_none()
                && self.dir[split(dpn).0].is_none()
            {
                // Both leaves are empty: skip to the nearer leaf boundary.
                let left = |pn: u32| LEAF_LEN as u64 - (pn as u64 & (LEAF_LEN as u64 - 1));
                let full = (len - done) >> PAGE_SHIFT;
                done += left(spn).min(left(dpn)).min(full) << PAGE_SHIFT;
                continue;
            }
            if n == PAGE_SIZE {
                let page = src.page(spn).map(|p| {
                    if share {
                        Arc::clone(p)
                    } else {
                        Arc::new(**p)
                    }
                });
                self.set_page(dpn, page);
            } else {
                match src.page(spn) {
                    Some(p) => {
                        let chunk = &p[o..o + n];
                        if self.page(dpn).is_some() || chunk.iter().any(|&b| b != 0) {
                            self.page_mut(dpn)[o..o + n].copy_from_slice(chunk);
                        }
                    }
                    None => {
                        if self.page(dpn).is_some() {
                            self.page_mut(dpn)[o..o + n].fill(0);
                        }
                    }
                }
            }
            done += n as u64;
        }
    }

    /// Observable equality: unmapped pages equal all-zero pages.
    pub fn content_eq(&self, other: &AddressSpace) -> bool {
        let zero = [0u8; PAGE_SIZE];
        let check = |a: &AddressSpace, b: &AddressSpace| {
            a.pages().all(|(pn, p)| match b.page(pn) {
                Some(q) => Arc::ptr_eq(p, q) || **p == **q,
                None => **p == zero,
            })
        };
        check(self, other) && check(other, self)
    }

    /// Digest of the observable contents, independent of page sharing and of
    /// whether zero pages happen to be materialized.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        h.finalize().into()
    }

    pub fn hash_into(&self, h: &mut Sha256) {
        for (pn, p) in self.pages() {
            if p.iter().any(|&b| b != 0) {
                h.update(pn.to_le_bytes());
                h.update(&p[..]);
            }
        }
    }
}
