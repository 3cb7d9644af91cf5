#pragma once

// Single-slide refinement session exposed over HTTP for the review UI.
//
//   GET  /api/session                 slide metadata, round index, Dice log
//   GET  /api/patches?round=r         grid, predictions, entropies, thumbnails
//   POST /api/annotations             AnnotationEvent list, queued for the next round
//   POST /api/round                   runs one refinement round with the queue
//   GET  /api/mask?level=patch|pixel  current mask as an 8-bit PNG
//
// Errors are JSON {"error": kind, "message": text}: 400 for malformed input,
// 404 for an unknown round, 409 while a round is running.

#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "tseg/refine.hpp"

namespace httplib {
class Server;
}

namespace tseg {

class HitlSession {
 public:
  /// Runs round 0 immediately.
  HitlSession(Model model, Image slide, std::optional<RasterMask> gt, std::vector<ClassPrompt> classes,
              RefineOptions options = {});

  std::string session_json() const;
  /// Patches of the given round (default: current). Labels of the current
  /// round include queued annotations.
  std::string patches_json(std::optional<int> round, bool thumbnails = true) const;
  /// Body: an array of events or {"events": [...]}. All-or-nothing.
  std::string submit_annotations(const std::string& body);
  /// Consumes the queued annotations. Busy error while another round runs.
  std::string run_round();
  /// level: "patch" or "pixel".
  std::vector<std::uint8_t> mask_png(const std::string& level) const;

  RoundState state() const;
  std::size_t pending() const;

 private:
  std::string thumbnail(int id) const;

  mutable std::mutex mutex_;
  bool busy_ = false;
  Model model_;
  Image slide_;
  std::optional<RasterMask> gt_;
  RefineOptions options_;
  PatchGrid grid_;
  std::vector<RoundState> history_;
  RoundOutput current_;
  std::vector<AnnotationEvent> pending_;
  mutable std::vector<std::string> thumbnails_;
};

/// Registers the /api routes on a server; the session must outlive it.
void mount_routes(httplib::Server& server, HitlSession& session);

}  // namespace tseg
