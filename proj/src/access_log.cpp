#include "sfuida/access_log.hpp"

#include <algorithm>

namespace sfuida {

namespace {
thread_local DataAccessLog* t_active_log = nullptr;
thread_local std::string t_stage;
}  // namespace

void DataAccessLog::record(std::string_view subject_id, AccessKind kind, std::string_view stage) {
  std::lock_guard lock(mutex_);
  events_.push_back({std::string(subject_id), kind, std::string(stage)});
}

std::vector<AccessEvent> DataAccessLog::events() const {
  std::lock_guard lock(mutex_);
  return events_;
}

std::vector<AccessEvent> DataAccessLog::events_in_stage(std::string_view stage) const {
  std::lock_guard lock(mutex_);
  std::vector<AccessEvent> out;
  std::copy_if(events_.begin(), events_.end(), std::back_inserter(out),
               [&](const AccessEvent& e) { return e.stage == stage; });
  return out;
}

std::size_t DataAccessLog::size() const {
  std::lock_guard lock(mutex_);
  return events_.size();
}

void DataAccessLog::clear() {
  std::lock_guard lock(mutex_);
  events_.clear();
}

ScopedAccessLog::ScopedAccessLog(DataAccessLog& log) : previous_(t_active_log) {
  t_active_log = &log;
}

ScopedAccessLog::~ScopedAccessLog() { t_active_log = previous_; }

StageTag::StageTag(std::string stage) : previous_(std::move(t_stage)) { t_stage = std::move(stage); }

StageTag::~StageTag() { t_stage = std::move(previous_); }

DataAccessLog* active_access_log() { return t_active_log; }

void record_access(std::string_view subject_id, AccessKind kind) {
  if (t_active_log != nullptr) t_active_log->record(subject_id, kind, t_stage);
}

std::string current_stage() { return t_stage; }

}  // namespace sfuida
