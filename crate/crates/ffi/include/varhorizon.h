#ifndef VARHORIZON_H
#define VARHORIZON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum VhStatus {
  VH_STATUS_OK = 0,
  VH_STATUS_NULL_POINTER = 1,
  VH_STATUS_INVALID_ARGUMENT = 2,
  VH_STATUS_IO = 3,
  VH_STATUS_FORMAT = 4,
  VH_STATUS_NUMERICAL = 5,
  VH_STATUS_BUFFER_TOO_SMALL = 6,
  VH_STATUS_PANIC = 7,
} VhStatus;

/**
 * Trained length predictor.
 */
typedef struct VhLp VhLp;

/**
 * Maze geometry and dynamics.
 */
typedef struct VhMaze VhMaze;

/**
 * Trained diffusion planner.
 */
typedef struct VhPlanner VhPlanner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *vh_last_error(void);

/**
 * Built-in layout by name: "umaze", "medium" or "large".
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VhStatus vh_maze_builtin(const char *name, struct VhMaze **out);

/**
 * Layout from `#`/`.` text with the given cell size and default dynamics.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VhStatus vh_maze_parse(const char *text, double cell_size, struct VhMaze **out);

/**
 * # Safety
 * `maze` must come from a maze constructor and not be used afterwards.
 */
void vh_maze_free(struct VhMaze *maze);

/**
 * Grid size in cells.
 *
 * # Safety
 * All pointers must be valid.
 */
enum VhStatus vh_maze_dims(const struct VhMaze *maze, size_t *rows, size_t *cols);

/**
 * Whether world position (x, y) lies in free space.
 *
 * # Safety
 * All pointers must be valid.
 */
enum VhStatus vh_maze_is_free(const struct VhMaze *maze, double x, double y, bool *out);

/**
 * One environment step.
 *
 * # Safety
 * `state` and `out` point to 4 doubles, `action` to 2.
 */
enum VhStatus vh_maze_step(const struct VhMaze *maze,
                           const double *state,
                           const double *action,
                           double *out);

/**
 * Shortest step count from `start` into the ε-box around `goal`'s position,
 * truncated at `cap`. Writes -1 when the goal is not connected to the start.
 *
 * # Safety
 * `start` and `goal` point to 4 doubles; `out` is valid.
 */
enum VhStatus vh_oracle_steps(const struct VhMaze *maze,
                              const double *start,
                              const double *goal,
                              double eps,
                              uint32_t cap,
                              int64_t *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VhStatus vh_lp_load(const char *path, struct VhLp **out);

/**
 * # Safety
 * `lp` must come from [`vh_lp_load`] and not be used afterwards.
 */
void vh_lp_free(struct VhLp *lp);

/**
 * Normalized distance in [0, 1] and the horizon it maps to with the default
 * horizon settings and scale `gamma`.
 *
 * # Safety
 * `start` and `goal` point to 4 doubles; the outputs are valid.
 */
enum VhStatus vh_lp_predict(const struct VhLp *lp,
                            const struct VhMaze *maze,
                            const double *start,
                            const double *goal,
                            double gamma,
                            double *distance,
                            size_t *horizon);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VhStatus vh_planner_load(const char *path, struct VhPlanner **out);

/**
 * # Safety
 * `planner` must come from [`vh_planner_load`] and not be used afterwards.
 */
void vh_planner_free(struct VhPlanner *planner);

/**
 * Supported plan lengths.
 *
 * # Safety
 * All pointers must be valid.
 */
enum VhStatus vh_planner_bounds(const struct VhPlanner *planner, size_t *min, size_t *max);

/**
 * Samples a plan of `len` states from `start` to `goal` into `out`, which
 * holds `cap` doubles and needs `4 * len`. Seeded, so repeat calls agree.
 *
 * # Safety
 * `start` and `goal` point to 4 doubles; `out` points to `cap` doubles.
 */
enum VhStatus vh_planner_plan(const struct VhPlanner *planner,
                              const struct VhMaze *maze,
                              const double *start,
                              const double *goal,
                              size_t len,
                              uint64_t seed,
                              double *out,
                              size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARHORIZON_H */
