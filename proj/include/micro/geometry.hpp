#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace micro {

struct CameraIntrinsics {
    double fx = 128.0, fy = 128.0;
    double cx = 128.0, cy = 128.0;
};

// Rigid camera pose, camera-to-world: X_world = R * X_cam + t.
struct PoseSE3 {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

struct Trajectory {
    std::vector<Eigen::Vector3d> positions;
};

inline bool is_rotation(const Eigen::Matrix3d& R, double tol = 1e-9) {
    return (R.transpose() * R - Eigen::Matrix3d::Identity()).norm() <= tol &&
           std::abs(R.determinant() - 1.0) <= tol;
}

// Nearest rotation in Frobenius norm, via SVD.
inline Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& R) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d Q = svd.matrixU() * svd.matrixV().transpose();
    if (Q.determinant() < 0.0) {
        Eigen::Matrix3d U = svd.matrixU();
        U.col(2) *= -1.0;
        Q = U * svd.matrixV().transpose();
    }
    return Q;
}

inline double rotation_angle(const Eigen::Matrix3d& R) {
    const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

} // namespace micro
