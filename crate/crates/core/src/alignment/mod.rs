//! Frozen teacher features and the per-stream alignment losses.

pub mod dfea;
pub mod head;
pub mod teacher;

pub use head::{align_loss, init_heads, is_head_param, neg_cosine};
pub use teacher::{export_features, file_teacher, random_teacher, FileTeacher, RandomTeacher, TeacherFeatures, TeacherProvider};
