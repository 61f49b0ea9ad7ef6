/* Trains the sinusoid preset briefly and scores it on held-out tasks.
 *
 *   cargo build --release -p metalora-ffi
 *   cc crates/ffi/examples/train.c -Icrates/ffi/include \
 *      target/release/libmetalora_ffi.a -lpthread -ldl -lm -o train
 */
#include <stdio.h>
#include "metalora.h"

static int fail(const char *what, MloraStatus s) {
    const char *msg = mlora_last_error_message();
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, msg ? msg : "");
    return 1;
}

int main(void) {
    MloraConfig *cfg = NULL;
    MloraAdapter *adapter = NULL;
    uint64_t examples = 0;
    double mean = 0.0, sd = 0.0;
    MloraStatus s;

    printf("metalora %s\n", mlora_version());
    if ((s = mlora_config_preset("sinusoid", &cfg)) != MLORA_STATUS_OK) return fail("preset", s);
    mlora_config_set_iterations(cfg, 200);
    if ((s = mlora_train(cfg, "runs/c-demo", &adapter, &examples)) != MLORA_STATUS_OK) return fail("train", s);
    printf("trained on %llu examples, %zu adapter parameters\n",
           (unsigned long long)examples, mlora_adapter_param_count(adapter));
    if ((s = mlora_evaluate(cfg, adapter, &mean, &sd)) != MLORA_STATUS_OK) return fail("evaluate", s);
    printf("held-out query loss %.4f +- %.4f\n", mean, sd);
    mlora_adapter_free(adapter);
    mlora_config_free(cfg);
    return 0;
}
