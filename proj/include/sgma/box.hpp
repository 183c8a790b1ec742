#pragma once

namespace sgma {

/// Axis-aligned square: center (cx, cy) and side length, in pixels.
struct Box {
  double cx = 0, cy = 0, side = 0;

  double left() const { return cx - side / 2; }
  double right() const { return cx + side / 2; }
  double top() const { return cy - side / 2; }
  double bottom() const { return cy + side / 2; }
};

}  // namespace sgma
