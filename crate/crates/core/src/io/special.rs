//! Reserved token ids shared by every vocabulary.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

/// Number of reserved ids; ordinary tokens start here.
pub const COUNT: usize = 5;

pub const NAMES: [&str; COUNT] = ["<pad>", "<s>", "</s>", "<unk>", "[MASK]"];

pub fn is_special(id: usize) -> bool {
    id < COUNT
}
