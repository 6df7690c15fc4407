//! Subnormal handling for the current thread.
//!
//! Once a network fits its training data the backward pass is full of
//! subnormal values, and x86 arithmetic on those is one to two orders of
//! magnitude slower. Flushing them to zero keeps long runs at a steady
//! speed; results stay deterministic.

/// Enables flush-to-zero and denormals-are-zero until dropped, then restores
/// the previous mode. A no-op off x86_64.
pub struct FlushSubnormals {
    #[cfg_attr(not(target_arch = "x86_64"), allow(dead_code))]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    pub fn get() -> u32 {
        let mut csr = 0u32;
        // SAFETY: stmxcsr writes four bytes to a valid local.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
        csr
    }

    pub fn set(csr: u32) {
        // SAFETY: ldmxcsr reads four bytes from a valid local; only rounding
        // and exception-mask bits that `get` returned or FTZ/DAZ are set.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
    }

    pub fn flush_bits() -> u32 {
        FTZ | DAZ
    }
}

impl FlushSubnormals {
    pub fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = imp::get();
            imp::set(saved | imp::flush_bits());
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self { saved: 0 }
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        imp::set(self.saved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnormals_flush_only_while_enabled() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!((tiny * half).is_subnormal());
        {
            let _guard = FlushSubnormals::enable();
            if cfg!(target_arch = "x86_64") {
                assert_eq!(tiny * half, 0.0);
            }
        }
        assert!((tiny * half).is_subnormal());
    }
}
