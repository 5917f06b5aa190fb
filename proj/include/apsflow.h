/* C interface to the adaptive pyramid sampling flow library.
 *
 * All objects are opaque handles created and destroyed through this API.
 * Functions return apsflow_status; on any non-OK status a thread-local
 * message is available via apsflow_last_error(). Images and flow fields are
 * float32 HWC row-major buffers.
 */
#ifndef APSFLOW_H_
#define APSFLOW_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum apsflow_status {
  APSFLOW_OK = 0,
  APSFLOW_ERROR = 1,
  APSFLOW_INVALID_ARGUMENT = 2,
  APSFLOW_IO_ERROR = 3,
  APSFLOW_FORMAT_ERROR = 4,
  APSFLOW_NUMERIC_ERROR = 5,
  APSFLOW_CONTRACT_ERROR = 6
} apsflow_status;

/* Message for the most recent failing call on this thread; never NULL. */
const char* apsflow_last_error(void);

const char* apsflow_version(void);

/* ---- flow fields -------------------------------------------------------- */

typedef struct apsflow_flow apsflow_flow;

apsflow_status apsflow_flow_create(int32_t width, int32_t height,
                                   const float* data /* HxWx2, may be NULL */,
                                   apsflow_flow** out);
apsflow_status apsflow_flow_read(const char* path, apsflow_flow** out);
apsflow_status apsflow_flow_write(const apsflow_flow* flow, const char* path);
apsflow_status apsflow_flow_size(const apsflow_flow* flow, int32_t* width,
                                 int32_t* height);
/* Copies H*W*2 floats into `data`. */
apsflow_status apsflow_flow_data(const apsflow_flow* flow, float* data);
void apsflow_flow_destroy(apsflow_flow* flow);

/* ---- images ------------------------------------------------------------- */

typedef struct apsflow_image apsflow_image;

apsflow_status apsflow_image_create(int32_t width, int32_t height,
                                    int32_t channels, const float* data,
                                    apsflow_image** out);
apsflow_status apsflow_image_read_png(const char* path, apsflow_image** out);
apsflow_status apsflow_image_write_png(const apsflow_image* image,
                                       const char* path);
apsflow_status apsflow_image_size(const apsflow_image* image, int32_t* width,
                                  int32_t* height, int32_t* channels);
apsflow_status apsflow_image_data(const apsflow_image* image, float* data);
void apsflow_image_destroy(apsflow_image* image);

/* Renders a flow field to an RGB wheel visualization. max_magnitude <= 0
 * autoscales to the field's own maximum. */
apsflow_status apsflow_flow_visualize(const apsflow_flow* flow,
                                      float max_magnitude,
                                      apsflow_image** out);

/* Renders per-pixel endpoint error between two same-size flow fields as a
 * brightness map (brighter = larger error). max_error <= 0 autoscales. */
apsflow_status apsflow_error_map(const apsflow_flow* predicted,
                                 const apsflow_flow* reference,
                                 float max_error, apsflow_image** out);

/* ---- configuration ------------------------------------------------------ */

typedef struct apsflow_config apsflow_config;

/* Parses `key = value` lines; unknown keys are an error. path may be NULL for
 * all-defaults. */
apsflow_status apsflow_config_create(const char* path, apsflow_config** out);
apsflow_status apsflow_config_set(apsflow_config* config, const char* key,
                                  const char* value);
void apsflow_config_destroy(apsflow_config* config);

/* ---- models ------------------------------------------------------------- */

typedef struct apsflow_model apsflow_model;

apsflow_status apsflow_model_create(const apsflow_config* config,
                                    uint64_t seed, apsflow_model** out);
apsflow_status apsflow_model_load(const char* checkpoint_path,
                                  apsflow_model** out);
apsflow_status apsflow_model_save(const apsflow_model* model,
                                  const char* checkpoint_path);
/* Runs inference on an image pair; both images must share dimensions
 * divisible by the model's pyramid stride. */
apsflow_status apsflow_model_infer(apsflow_model* model,
                                   const apsflow_image* image1,
                                   const apsflow_image* image2,
                                   apsflow_flow** out);
/* Fails with APSFLOW_CONTRACT_ERROR when the config's network section does
 * not match the model's. */
apsflow_status apsflow_model_check_config(const apsflow_model* model,
                                          const apsflow_config* config);
/* Cosine feature-similarity heatmaps for one query pixel of image1: all
 * pyramid features upsampled to image size and concatenated, compared against
 * every position of image1 (self map) and image2 (cross map). Rendered on a
 * fixed [-1, 1] color scale. Out-of-bounds pixel → APSFLOW_INVALID_ARGUMENT. */
apsflow_status apsflow_similarity_maps(apsflow_model* model,
                                       const apsflow_image* image1,
                                       const apsflow_image* image2, int32_t x,
                                       int32_t y, apsflow_image** self_map,
                                       apsflow_image** cross_map);
void apsflow_model_destroy(apsflow_model* model);

/* ---- high-level pipelines ------------------------------------------------ */

/* Generates a synthetic dataset under out_dir: per scene two PNG frames, the
 * exact .flo field, an occlusion PNG, plus a manifest.jsonl listing them. */
apsflow_status apsflow_generate_dataset(const apsflow_config* config,
                                        uint64_t seed, int32_t count,
                                        const char* out_dir);

/* Trains a model from scratch on procedurally generated scenes (the dataset
 * is defined by the config and seed). Writes checkpoint.ckpt, train_log.jsonl
 * and metrics.json under out_dir. The seed replaces train.seed. final_epe may
 * be NULL. */
apsflow_status apsflow_train(const apsflow_config* config, uint64_t seed,
                             const char* out_dir, double* final_epe);

/* Evaluates a checkpoint. data_dir selects a generated dataset directory (one
 * holding manifest.jsonl); NULL evaluates the validation split defined by the
 * checkpoint's own config. Writes metrics JSON to out_path unless that is
 * NULL. epe_out may be NULL. */
apsflow_status apsflow_evaluate(const char* checkpoint_path,
                                const char* data_dir, const char* out_path,
                                double* epe_out);

/* Trains every variant of a named preset (pooling, upsampling, loss-terms)
 * from the shared base config and writes table.txt plus rows.jsonl under
 * out_dir. Unknown preset → APSFLOW_CONTRACT_ERROR. */
apsflow_status apsflow_ablate(const apsflow_config* config, const char* preset,
                              uint64_t seed, const char* out_dir);

/* Runs the finite-difference suite for scope "ops", "losses" or "end2end".
 * Writes a per-op report (worst relative error each) to report_path unless
 * NULL; *failures_out gets the number of failing entries. */
apsflow_status apsflow_gradcheck(const char* scope, const char* report_path,
                                 int32_t* failures_out);

#ifdef __cplusplus
}
#endif

#endif /* APSFLOW_H_ */
