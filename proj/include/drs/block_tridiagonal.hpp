#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <vector>

#include "drs/error.hpp"

namespace drs {

/// Symmetric block-tridiagonal matrix with square blocks of equal size,
/// stored as its diagonal blocks and the blocks just below the diagonal.
/// `lower(k)` is block (k, k-1).
class BlockTridiagonal {
 public:
  BlockTridiagonal(Eigen::Index blocks, Eigen::Index block_size)
      : bs_(block_size),
        diag_(blocks, Eigen::MatrixXd::Zero(block_size, block_size)),
        lower_(blocks, Eigen::MatrixXd::Zero(block_size, block_size)) {}

  Eigen::Index blocks() const { return static_cast<Eigen::Index>(diag_.size()); }
  Eigen::Index block_size() const { return bs_; }
  Eigen::Index size() const { return blocks() * bs_; }

  Eigen::MatrixXd& diag(Eigen::Index k) { return diag_[k]; }
  const Eigen::MatrixXd& diag(Eigen::Index k) const { return diag_[k]; }
  Eigen::MatrixXd& lower(Eigen::Index k) { return lower_[k]; }
  const Eigen::MatrixXd& lower(Eigen::Index k) const { return lower_[k]; }

  /// Copies the tridiagonal band of a symmetric sparse matrix. Entries outside
  /// the band are ignored.
  static BlockTridiagonal from_sparse(const Eigen::SparseMatrix<double>& m,
                                      Eigen::Index block_size) {
    BlockTridiagonal out(m.rows() / block_size, block_size);
    for (int col = 0; col < m.outerSize(); ++col) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(m, col); it; ++it) {
        const Eigen::Index bi = it.row() / block_size, bj = it.col() / block_size;
        const Eigen::Index ri = it.row() % block_size, rj = it.col() % block_size;
        if (bi == bj) {
          out.diag_[bi](ri, rj) = it.value();
        } else if (bi == bj + 1) {
          out.lower_[bi](ri, rj) = it.value();
        }
      }
    }
    return out;
  }

  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(size(), size());
    for (Eigen::Index k = 0; k < blocks(); ++k) {
      out.block(k * bs_, k * bs_, bs_, bs_) = diag_[k];
      if (k > 0) {
        out.block(k * bs_, (k - 1) * bs_, bs_, bs_) = lower_[k];
        out.block((k - 1) * bs_, k * bs_, bs_, bs_) = lower_[k].transpose();
      }
    }
    return out;
  }

  /// Block Cholesky solve, O(blocks * block_size^3).
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    const Eigen::Index nb = blocks();
    std::vector<Eigen::MatrixXd> chol(nb), coupling(nb);
    std::vector<Eigen::VectorXd> z(nb);
    for (Eigen::Index k = 0; k < nb; ++k) {
      Eigen::MatrixXd pivot = diag_[k];
      Eigen::VectorXd r = rhs.segment(k * bs_, bs_);
      if (k > 0) {
        // coupling_k = B_k L_{k-1}^{-T}
        coupling[k] = chol[k - 1]
                          .triangularView<Eigen::Lower>()
                          .solve(lower_[k].transpose())
                          .transpose();
        pivot.noalias() -= coupling[k] * coupling[k].transpose();
        r.noalias() -= coupling[k] * z[k - 1];
      }
      Eigen::LLT<Eigen::MatrixXd> llt(pivot);
      if (llt.info() != Eigen::Success) {
        throw SingularMatrix("block tridiagonal matrix is not positive definite",
                             static_cast<int>(k));
      }
      chol[k] = llt.matrixL();
      z[k] = chol[k].triangularView<Eigen::Lower>().solve(r);
    }
    Eigen::VectorXd x(size());
    for (Eigen::Index k = nb - 1; k >= 0; --k) {
      Eigen::VectorXd r = z[k];
      if (k + 1 < nb) r.noalias() -= coupling[k + 1].transpose() * x.segment((k + 1) * bs_, bs_);
      x.segment(k * bs_, bs_) = chol[k].transpose().triangularView<Eigen::Upper>().solve(r);
    }
    return x;
  }

 private:
  Eigen::Index bs_;
  std::vector<Eigen::MatrixXd> diag_;
  std::vector<Eigen::MatrixXd> lower_;
};

}  // namespace drs
