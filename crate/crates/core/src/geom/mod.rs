//! Deterministic geometric primitives: frames, rigid alignment, sampling,
//! neighbourhoods and distances.

pub mod cloud;
pub mod kabsch;
pub mod linalg;
pub mod mat3;
pub mod transform;
pub mod vec3;

pub use cloud::{chamfer_distance, chamfer_points, farthest_point_sample, knn_graph, knn_query, PointCloud};
pub use kabsch::{weighted_kabsch, weighted_kabsch_pairs, KabschResult};
pub use mat3::Mat3;
pub use transform::{
    gram_schmidt_frame, random_rotation, random_rotation_with, RigidTransform, Rotation,
    TransformRecord,
};
pub use vec3::Vec3;
