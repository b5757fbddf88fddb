#pragma once

#include <cstddef>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace sfuida {

enum class AccessKind { Signals, Labels, DiskRead };

struct AccessEvent {
  std::string subject_id;
  AccessKind kind;
  std::string stage;  // innermost StageTag active when the access happened
};

// Records every signal/label access made through SubjectRecording and every
// on-disk subject read. Installed per thread with ScopedAccessLog; one log
// may be installed on several threads at once.
class DataAccessLog {
 public:
  void record(std::string_view subject_id, AccessKind kind, std::string_view stage);

  std::vector<AccessEvent> events() const;
  std::vector<AccessEvent> events_in_stage(std::string_view stage) const;
  std::size_t size() const;
  void clear();

 private:
  mutable std::mutex mutex_;
  std::vector<AccessEvent> events_;
};

class ScopedAccessLog {
 public:
  explicit ScopedAccessLog(DataAccessLog& log);
  ~ScopedAccessLog();
  ScopedAccessLog(const ScopedAccessLog&) = delete;
  ScopedAccessLog& operator=(const ScopedAccessLog&) = delete;

 private:
  DataAccessLog* previous_;
};

// Names the pipeline stage for events recorded on this thread.
class StageTag {
 public:
  explicit StageTag(std::string stage);
  ~StageTag();
  StageTag(const StageTag&) = delete;
  StageTag& operator=(const StageTag&) = delete;

 private:
  std::string previous_;
};

// Log installed on the calling thread, or nullptr.
DataAccessLog* active_access_log();

void record_access(std::string_view subject_id, AccessKind kind);
std::string current_stage();

}  // namespace sfuida
